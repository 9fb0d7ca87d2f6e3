//! Wengert tape over the fixed op set used by the registration loss and the
//! amortized network.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; `backward` walks it once in reverse.

use std::sync::Arc;

use super::conv::{conv_backward, conv_forward, ConvGeom};
use crate::deform::{resample_backward, resample_forward};
use crate::error::{Error, Result};
use crate::grid::{GridShape, LaplacianGraph};

/// Dense channel-first tensor: `shape[0]` channels, then spatial extents.
/// A scalar has an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape {shape:?} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    fn spatial(&self) -> &[usize] {
        &self.shape[1.min(self.shape.len())..]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Sum(Var),
    SumSquares(Var),
    WeightedSum(Var, Arc<Vec<f64>>),
    Resample {
        src: Var,
        disp: Var,
        grid: GridShape,
    },
    Quadratic(Var, Arc<LaplacianGraph>),
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    LeakyRelu(Var, f64),
    Upsample2(Var),
    Concat(Var, Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Single-owner recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not influence it.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Input or parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch(name, &ta.shape, &tb.shape));
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(Tensor {
            shape: ta.shape.clone(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * s).collect(),
        };
        self.push(Op::Scale(a, s), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x.exp()).collect(),
        };
        self.push(Op::Exp(a), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().map(|x| x * x).sum();
        self.push(Op::SumSquares(a), Tensor::scalar(s))
    }

    /// `Σ w[i]·a[i]` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Arc<Vec<f64>>) -> Result<Var> {
        let ta = self.value(a);
        if weights.len() != ta.len() {
            return Err(mismatch("weighted_sum", &[ta.len()], &[weights.len()]));
        }
        let s = ta.data.iter().zip(weights.iter()).map(|(x, w)| x * w).sum();
        Ok(self.push(Op::WeightedSum(a, weights), Tensor::scalar(s)))
    }

    /// Samples every channel of `src` at `p + disp(p)` with linear
    /// interpolation and clamp-to-edge. `disp` has one channel per spatial axis.
    pub fn resample(&mut self, src: Var, disp: Var) -> Result<Var> {
        let (ts, td) = (self.value(src), self.value(disp));
        let spatial = ts.spatial();
        if td.spatial() != spatial || td.shape.first() != Some(&spatial.len()) {
            return Err(mismatch("resample", &ts.shape, &td.shape));
        }
        let grid = GridShape::new(spatial)?;
        let out = resample_forward(&ts.data, &grid, &td.data);
        let t = Tensor {
            shape: ts.shape.clone(),
            data: out,
        };
        Ok(self.push(Op::Resample { src, disp, grid }, t))
    }

    /// Displacement of `a ∘ b`: `b + resample(a, b)`.
    pub fn compose(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.resample(a, b)?;
        self.add(b, s)
    }

    /// Scaling and squaring of a velocity tensor `[ndim, spatial...]`.
    pub fn integrate_ss(&mut self, velocity: Var, steps: u32) -> Result<Var> {
        let mut u = self.scale(velocity, 0.5f64.powi(steps as i32));
        for _ in 0..steps {
            u = self.compose(u, u)?;
        }
        Ok(u)
    }

    /// Σ over channels and undirected graph edges of squared differences.
    pub fn laplacian_quadratic(&mut self, a: Var, graph: Arc<LaplacianGraph>) -> Result<Var> {
        let ta = self.value(a);
        if ta.spatial() != graph.shape().dims() {
            return Err(mismatch(
                "laplacian_quadratic",
                &ta.shape,
                graph.shape().dims(),
            ));
        }
        let q = graph.quadratic_channels(&ta.data);
        Ok(self.push(Op::Quadratic(a, graph), Tensor::scalar(q)))
    }

    pub fn conv(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let geom = ConvGeom::new(&self.value(input).shape, &self.value(weight).shape, stride)?;
        if self.value(bias).len() != geom.cout {
            return Err(mismatch(
                "conv bias",
                self.value(bias).shape(),
                &[geom.cout],
            ));
        }
        let out = conv_forward(
            &self.value(input).data,
            &self.value(weight).data,
            &self.value(bias).data,
            &geom,
        );
        let nd = self.value(input).shape.len() - 1;
        let mut shape = vec![geom.cout];
        shape.extend_from_slice(&geom.out_dims[3 - nd..]);
        let t = Tensor { shape, data: out };
        Ok(self.push(
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
            t,
        ))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let ta = self.value(a);
        let data = ta
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(Op::LeakyRelu(a, slope), t)
    }

    /// Nearest-neighbor ×2 upsampling along every spatial axis.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (src, dst) = upsample_dims(&ta.shape);
        let mut out = vec![0.0; dst.iter().product::<usize>() * ta.shape[0]];
        for_upsample(&src, &dst, ta.shape[0], |o, i| out[o] = ta.data[i]);
        let mut shape = vec![ta.shape[0]];
        shape.extend_from_slice(&dst[3 - (ta.shape.len() - 1)..]);
        let t = Tensor { shape, data: out };
        self.push(Op::Upsample2(a), t)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.spatial() != tb.spatial() {
            return Err(mismatch("concat", &ta.shape, &tb.shape));
        }
        let mut shape = ta.shape.clone();
        shape[0] += tb.shape[0];
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        Ok(self.push(Op::Concat(a, b), Tensor { shape, data }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], lens: &[usize], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; lens[v.0]])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, &lens, *a), &g, 1.0);
                    add_into(acc(&mut grads, &lens, *b), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, &lens, *a), &g, 1.0);
                    add_into(acc(&mut grads, &lens, *b), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                    let ga = acc(&mut grads, &lens, *a);
                    ga.iter_mut()
                        .zip(&g)
                        .zip(vb)
                        .for_each(|((d, g), y)| *d += g * y);
                    let gb = acc(&mut grads, &lens, *b);
                    gb.iter_mut()
                        .zip(&g)
                        .zip(va)
                        .for_each(|((d, g), x)| *d += g * x);
                }
                Op::Scale(a, s) => add_into(acc(&mut grads, &lens, *a), &g, *s),
                Op::Exp(a) => {
                    let ga = acc(&mut grads, &lens, *a);
                    ga.iter_mut()
                        .zip(&g)
                        .zip(&node.value.data)
                        .for_each(|((d, g), e)| *d += g * e);
                }
                Op::Sum(a) => {
                    let ga = acc(&mut grads, &lens, *a);
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::SumSquares(a) => {
                    let va = &self.value(*a).data;
                    let ga = acc(&mut grads, &lens, *a);
                    ga.iter_mut()
                        .zip(va)
                        .for_each(|(d, x)| *d += 2.0 * g[0] * x);
                }
                Op::WeightedSum(a, w) => {
                    let ga = acc(&mut grads, &lens, *a);
                    ga.iter_mut()
                        .zip(w.iter())
                        .for_each(|(d, w)| *d += g[0] * w);
                }
                Op::Resample { src, disp, grid } => {
                    let (vs, vd) = (&self.value(*src).data, &self.value(*disp).data);
                    if src == disp {
                        let mut gs = vec![0.0; vs.len()];
                        let mut gd = vec![0.0; vd.len()];
                        resample_backward(vs, grid, vd, &g, Some(&mut gs), Some(&mut gd));
                        let t = acc(&mut grads, &lens, *src);
                        add_into(t, &gs, 1.0);
                        add_into(t, &gd, 1.0);
                    } else {
                        let mut gs = grads[src.0]
                            .take()
                            .unwrap_or_else(|| vec![0.0; lens[src.0]]);
                        let gd = acc(&mut grads, &lens, *disp);
                        resample_backward(vs, grid, vd, &g, Some(&mut gs), Some(gd));
                        grads[src.0] = Some(gs);
                    }
                }
                Op::Quadratic(a, graph) => {
                    let va = &self.value(*a).data;
                    graph.accumulate_gradient(va, g[0], acc(&mut grads, &lens, *a));
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let (vi, vw) = (&self.value(*input).data, &self.value(*weight).data);
                    let mut gi = grads[input.0]
                        .take()
                        .unwrap_or_else(|| vec![0.0; lens[input.0]]);
                    let mut gw = grads[weight.0]
                        .take()
                        .unwrap_or_else(|| vec![0.0; lens[weight.0]]);
                    let gb = acc(&mut grads, &lens, *bias);
                    conv_backward(vi, vw, &g, geom, Some(&mut gi), Some(&mut gw), Some(gb));
                    grads[input.0] = Some(gi);
                    grads[weight.0] = Some(gw);
                }
                Op::LeakyRelu(a, slope) => {
                    let va = &self.value(*a).data;
                    let ga = acc(&mut grads, &lens, *a);
                    ga.iter_mut()
                        .zip(&g)
                        .zip(va)
                        .for_each(|((d, g), x)| *d += if *x > 0.0 { *g } else { slope * g });
                }
                Op::Upsample2(a) => {
                    let shape = &self.value(*a).shape;
                    let (src, dst) = upsample_dims(shape);
                    let ga = acc(&mut grads, &lens, *a);
                    for_upsample(&src, &dst, shape[0], |o, i| ga[i] += g[o]);
                }
                Op::Concat(a, b) => {
                    let na = lens[a.0];
                    add_into(acc(&mut grads, &lens, *a), &g[..na], 1.0);
                    add_into(acc(&mut grads, &lens, *b), &g[na..], 1.0);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        // interior nodes were consumed; only leaves keep their gradient
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, lens })
    }
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    dst.iter_mut().zip(src).for_each(|(d, x)| *d += s * x);
}

fn upsample_dims(shape: &[usize]) -> ([usize; 3], [usize; 3]) {
    let nd = shape.len() - 1;
    let mut src = [1; 3];
    src[3 - nd..].copy_from_slice(&shape[1..]);
    let mut dst = src;
    for d in dst.iter_mut().skip(3 - nd) {
        *d *= 2;
    }
    (src, dst)
}

fn for_upsample(
    src: &[usize; 3],
    dst: &[usize; 3],
    channels: usize,
    mut f: impl FnMut(usize, usize),
) {
    let dz = dst[0] / src[0];
    for c in 0..channels {
        for z in 0..dst[0] {
            for y in 0..dst[1] {
                let irow = ((c * src[0] + z / dz) * src[1] + y / 2) * src[2];
                let orow = ((c * dst[0] + z) * dst[1] + y) * dst[2];
                for x in 0..dst[2] {
                    f(orow + x, irow + x / 2);
                }
            }
        }
    }
}
