//! Deformation machinery: linear-interpolation sampling, warping, field
//! composition, the scaling-and-squaring exponential and Jacobian analysis.
//!
//! A deformation is stored as a displacement field `u` with `φ(p) = p + u(p)`,
//! so the identity is exactly the all-zero field. Sampling outside the grid
//! clamps each coordinate to `[0, extent - 1]` before interpolating.

use crate::error::{Error, Result};
use crate::grid::{GridShape, LabelMap, ScalarImage, VectorField};

/// Default number of squaring steps.
pub const DEFAULT_SQUARING_STEPS: u32 = 7;

/// A map `φ(p) = p + u(p)` on a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    displacement: VectorField,
}

impl DeformationField {
    pub fn identity(shape: GridShape) -> Self {
        Self {
            displacement: VectorField::zeros(shape),
        }
    }

    pub fn from_displacement(displacement: VectorField) -> Self {
        Self { displacement }
    }

    pub fn shape(&self) -> &GridShape {
        self.displacement.shape()
    }

    pub fn displacement(&self) -> &VectorField {
        &self.displacement
    }

    pub fn into_displacement(self) -> VectorField {
        self.displacement
    }

    pub fn is_identity(&self) -> bool {
        self.displacement.data().iter().all(|&v| v == 0.0)
    }
}

/// Anything that can be sampled with linear interpolation.
pub trait Raster {
    fn grid(&self) -> &GridShape;
    fn channels(&self) -> usize;
    /// Channel-first values.
    fn raw(&self) -> &[f64];
}

impl Raster for ScalarImage {
    fn grid(&self) -> &GridShape {
        self.shape()
    }
    fn channels(&self) -> usize {
        1
    }
    fn raw(&self) -> &[f64] {
        self.values()
    }
}

impl Raster for VectorField {
    fn grid(&self) -> &GridShape {
        self.shape()
    }
    fn channels(&self) -> usize {
        self.ndim()
    }
    fn raw(&self) -> &[f64] {
        self.data()
    }
}

/// Interpolation corners, weights and weight derivatives for one location.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub corners: usize,
    pub idx: [usize; 8],
    pub w: [f64; 8],
    /// `dw[a][k]`: derivative of weight `k` w.r.t. the location along axis
    /// `a`; zero along axes where the location was clamped.
    pub dw: [[f64; 8]; 3],
}

pub(crate) fn stencil(dims: &[usize], strides: &[usize], q: &[f64]) -> Stencil {
    let nd = dims.len();
    let mut i0 = [0usize; 3];
    let mut f = [0.0f64; 3];
    let mut inside = [0.0f64; 3];
    for a in 0..nd {
        let hi = (dims[a] - 1) as f64;
        let raw = q[a];
        let c = raw.clamp(0.0, hi);
        inside[a] = if (0.0..=hi).contains(&raw) { 1.0 } else { 0.0 };
        let base = (c.floor() as usize).min(dims[a] - 2);
        i0[a] = base;
        f[a] = c - base as f64;
    }
    let corners = 1usize << nd;
    let mut st = Stencil {
        corners,
        idx: [0; 8],
        w: [0.0; 8],
        dw: [[0.0; 8]; 3],
    };
    for k in 0..corners {
        let mut idx = 0;
        let mut w = 1.0;
        for a in 0..nd {
            let bit = (k >> (nd - 1 - a)) & 1;
            idx += (i0[a] + bit) * strides[a];
            w *= if bit == 1 { f[a] } else { 1.0 - f[a] };
        }
        st.idx[k] = idx;
        st.w[k] = w;
        for a in 0..nd {
            let mut d = inside[a];
            for b in 0..nd {
                let bit = (k >> (nd - 1 - b)) & 1;
                d *= if b == a {
                    if bit == 1 {
                        1.0
                    } else {
                        -1.0
                    }
                } else if bit == 1 {
                    f[b]
                } else {
                    1.0 - f[b]
                };
            }
            st.dw[a][k] = d;
        }
    }
    st
}

/// Multilinear interpolation of every channel of `raster` at `location`.
pub fn sample_linear<R: Raster + ?Sized>(raster: &R, location: &[f64]) -> Result<Vec<f64>> {
    let shape = raster.grid();
    if location.len() != shape.ndim() {
        return Err(Error::ShapeMismatch(format!(
            "location has {} coordinates, grid is {}D",
            location.len(),
            shape.ndim()
        )));
    }
    if location.iter().any(|c| c.is_nan()) {
        return Err(Error::NonFinite("sample location".into()));
    }
    let st = stencil(shape.dims(), &shape.strides(), location);
    let n = shape.len();
    Ok(raster
        .raw()
        .chunks_exact(n)
        .map(|ch| (0..st.corners).map(|k| st.w[k] * ch[st.idx[k]]).sum())
        .collect())
}

/// Samples the channel-first buffer `src` at `p + disp(p)` for every voxel.
pub(crate) fn resample_forward(src: &[f64], shape: &GridShape, disp: &[f64]) -> Vec<f64> {
    let n = shape.len();
    let nd = shape.ndim();
    let dims = shape.dims();
    let strides = shape.strides();
    let channels = src.len() / n;
    let mut out = vec![0.0; channels * n];
    let mut c = [0usize; 3];
    let mut q = [0.0f64; 3];
    for i in 0..n {
        shape.coords_into(i, &mut c[..nd]);
        for a in 0..nd {
            q[a] = c[a] as f64 + disp[a * n + i];
        }
        let st = stencil(dims, &strides, &q[..nd]);
        for ch in 0..channels {
            let s = &src[ch * n..(ch + 1) * n];
            let mut acc = 0.0;
            for k in 0..st.corners {
                acc += st.w[k] * s[st.idx[k]];
            }
            out[ch * n + i] = acc;
        }
    }
    out
}

/// Reverse-mode counterpart of [`resample_forward`]: accumulates into the
/// source gradient (scattered to corners by weight) and into the displacement
/// gradient (through the weight derivatives).
pub(crate) fn resample_backward(
    src: &[f64],
    shape: &GridShape,
    disp: &[f64],
    g_out: &[f64],
    mut g_src: Option<&mut [f64]>,
    mut g_disp: Option<&mut [f64]>,
) {
    let n = shape.len();
    let nd = shape.ndim();
    let dims = shape.dims();
    let strides = shape.strides();
    let channels = src.len() / n;
    let mut c = [0usize; 3];
    let mut q = [0.0f64; 3];
    for i in 0..n {
        shape.coords_into(i, &mut c[..nd]);
        for a in 0..nd {
            q[a] = c[a] as f64 + disp[a * n + i];
        }
        let st = stencil(dims, &strides, &q[..nd]);
        for ch in 0..channels {
            let go = g_out[ch * n + i];
            if go == 0.0 {
                continue;
            }
            if let Some(gs) = g_src.as_deref_mut() {
                let gs = &mut gs[ch * n..(ch + 1) * n];
                for k in 0..st.corners {
                    gs[st.idx[k]] += st.w[k] * go;
                }
            }
            if let Some(gd) = g_disp.as_deref_mut() {
                let s = &src[ch * n..(ch + 1) * n];
                for a in 0..nd {
                    let mut d = 0.0;
                    for k in 0..st.corners {
                        d += st.dw[a][k] * s[st.idx[k]];
                    }
                    gd[a * n + i] += go * d;
                }
            }
        }
    }
}

fn same_shape(a: &GridShape, b: &GridShape, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("{what}: {a} vs {b}")))
    }
}

/// `y ∘ φ`: the image resampled at `p + u(p)`.
pub fn warp(image: &ScalarImage, phi: &DeformationField) -> Result<ScalarImage> {
    same_shape(image.shape(), phi.shape(), "warp")?;
    let out = resample_forward(image.values(), image.shape(), phi.displacement().data());
    ScalarImage::new(image.shape().clone(), out)
}

/// Label propagation by nearest-neighbor lookup at `p + u(p)`: each
/// coordinate is rounded (half away from zero) then clamped to the grid.
pub fn warp_labels(labels: &LabelMap, phi: &DeformationField) -> Result<LabelMap> {
    same_shape(labels.shape(), phi.shape(), "warp_labels")?;
    let shape = labels.shape();
    let n = shape.len();
    let nd = shape.ndim();
    let u = phi.displacement().data();
    let mut c = vec![0usize; nd];
    let mut t = vec![0usize; nd];
    let src = labels.labels();
    let out = (0..n)
        .map(|i| {
            shape.coords_into(i, &mut c);
            for a in 0..nd {
                let q = (c[a] as f64 + u[a * n + i]).round();
                t[a] = q.clamp(0.0, (shape.dims()[a] - 1) as f64) as usize;
            }
            src[shape.index(&t)]
        })
        .collect();
    LabelMap::new(shape.clone(), out)
}

/// Displacement of `a ∘ b`: `u_b(p) + u_a(p + u_b(p))`.
pub(crate) fn compose_displacements(ua: &[f64], ub: &[f64], shape: &GridShape) -> Vec<f64> {
    let mut out = resample_forward(ua, shape, ub);
    out.iter_mut().zip(ub).for_each(|(o, b)| *o += b);
    out
}

/// `(a ∘ b)(p) = a(b(p))`.
pub fn compose(a: &DeformationField, b: &DeformationField) -> Result<DeformationField> {
    same_shape(a.shape(), b.shape(), "compose")?;
    let shape = a.shape();
    let out = compose_displacements(a.displacement().data(), b.displacement().data(), shape);
    Ok(DeformationField::from_displacement(VectorField::new(
        shape.clone(),
        out,
    )?))
}

/// `exp(v)` by scaling and squaring: start from `p + v(p) / 2^steps`, then
/// compose the map with itself `steps` times.
pub fn integrate_ss(velocity: &VectorField, steps: u32) -> Result<DeformationField> {
    let shape = velocity.shape();
    let scale = 0.5f64.powi(steps as i32);
    let mut u: Vec<f64> = velocity.data().iter().map(|v| v * scale).collect();
    for _ in 0..steps {
        u = compose_displacements(&u, &u, shape);
    }
    Ok(DeformationField::from_displacement(VectorField::new(
        shape.clone(),
        u,
    )?))
}

/// Forward-Euler integration of `dφ/dt = v(φ)` over `t ∈ [0, 1]`.
pub fn integrate_euler(velocity: &VectorField, steps: usize) -> Result<DeformationField> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "euler integration needs at least one step".into(),
        ));
    }
    let shape = velocity.shape();
    let h = 1.0 / steps as f64;
    let mut u = vec![0.0; velocity.data().len()];
    for _ in 0..steps {
        let v_at = resample_forward(velocity.data(), shape, &u);
        u.iter_mut().zip(&v_at).for_each(|(ui, vi)| *ui += h * vi);
    }
    Ok(DeformationField::from_displacement(VectorField::new(
        shape.clone(),
        u,
    )?))
}

/// Finite-difference derivative `∂u_comp/∂x_axis` at voxel `i`: central in
/// the interior, one-sided on the faces, unit spacing.
fn partial(
    u: &[f64],
    shape: &GridShape,
    strides: &[usize],
    coord: &[usize],
    i: usize,
    axis: usize,
) -> f64 {
    let e = shape.dims()[axis];
    let s = strides[axis];
    let c = coord[axis];
    if c == 0 {
        u[i + s] - u[i]
    } else if c + 1 == e {
        u[i] - u[i - s]
    } else {
        0.5 * (u[i + s] - u[i - s])
    }
}

/// Per-voxel determinant of `∇φ = I + ∇u`.
pub fn jacobian_determinant(phi: &DeformationField) -> ScalarImage {
    let shape = phi.shape();
    let n = shape.len();
    let nd = shape.ndim();
    let strides = shape.strides();
    let u = phi.displacement().data();
    let mut c = vec![0usize; nd];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        shape.coords_into(i, &mut c);
        let mut j = [[0.0f64; 3]; 3];
        for (a, row) in j.iter_mut().enumerate().take(nd) {
            let comp = &u[a * n..(a + 1) * n];
            for (b, entry) in row.iter_mut().enumerate().take(nd) {
                *entry = partial(comp, shape, &strides, &c, i, b) + if a == b { 1.0 } else { 0.0 };
            }
        }
        let det = if nd == 2 {
            j[0][0] * j[1][1] - j[0][1] * j[1][0]
        } else {
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        };
        out.push(det);
    }
    ScalarImage::new(shape.clone(), out).expect("determinant of a finite field is finite")
}

/// Number of voxels where `|Jφ| ≤ 0`.
pub fn count_nonpositive_jacobian(phi: &DeformationField) -> usize {
    jacobian_determinant(phi)
        .values()
        .iter()
        .filter(|&&d| d <= 0.0)
        .count()
}
