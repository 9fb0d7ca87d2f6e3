//! Central finite-difference checks of every differentiable primitive, the
//! full registration loss and the network's parameter gradient. Each suite
//! returns a description of its first failure.

use std::sync::Arc;

use diffreg::autodiff::{Tape, Tensor, Var};
use diffreg::grid::{make_laplacian, GridShape, ScalarImage, VectorField};
use diffreg::model::{
    draw_noise, field_tensor, image_tensor, record_elbo, LikelihoodSpec, PriorSpec,
};
use diffreg::net::{ImagePair, Network, NetworkSpec};
use diffreg::rng::{seeded, smooth_random_field, Rng};
use rand::Rng as _;

const H: f64 = 1e-4;
/// Smaller steps used when the primary stencil straddles a kink of linear
/// interpolation (a sample position crossing a voxel boundary).
const FALLBACK_H: [f64; 2] = [1e-5, 1e-6];
const REL: f64 = 1e-4;
const ABS: f64 = 1e-7;
const INSTANCES: u64 = 50;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= (REL * analytic.abs().max(numeric.abs())).max(ABS)
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `[lo, hi]` whose fractional part avoids the kinks of linear
/// interpolation at integers.
fn off_grid(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let base = rng.gen_range(lo.floor() as i64..hi.floor() as i64) as f64;
            base + rng.gen_range(0.1..0.9)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Compares the tape gradient of `build` w.r.t. each leaf in `leaves` with
/// central differences; returns a description of the first failure.
fn check<F>(leaves: &[Tensor], build: F) -> Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).map_err(|e| e.to_string())?;
    for (li, leaf) in leaves.iter().enumerate() {
        let g = grads.wrt(vars[li]);
        for j in 0..leaf.len() {
            let central = |h: f64| {
                let mut plus = leaves.to_vec();
                let mut minus = leaves.to_vec();
                let mut dp = plus[li].data().to_vec();
                let mut dm = minus[li].data().to_vec();
                dp[j] += h;
                dm[j] -= h;
                plus[li] = Tensor::new(leaf.shape().to_vec(), dp).unwrap();
                minus[li] = Tensor::new(leaf.shape().to_vec(), dm).unwrap();
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            };
            let fd = central(H);
            if !close(g[j], fd) && !FALLBACK_H.iter().all(|&h| close(g[j], central(h))) {
                return Err(format!(
                    "leaf {li} coordinate {j}: analytic {} vs numeric {fd}",
                    g[j]
                ));
            }
        }
    }
    Ok(())
}

/// Reduces a tensor to a scalar with fixed random weights so that every
/// output coordinate receives a distinct upstream gradient.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let n = tape.value(v).len();
    let mut rng = seeded(seed ^ 0xabc);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.weighted_sum(v, Arc::new(w)).unwrap()
}

fn run_instances<G>(name: &str, mut instance: G) -> Result<(), String>
where
    G: FnMut(u64) -> Result<(), String>,
{
    for seed in 0..INSTANCES {
        instance(seed).map_err(|e| format!("{name}, instance {seed}: {e}"))?;
    }
    Ok(())
}

fn random_dims(rng: &mut Rng) -> Vec<usize> {
    if rng.gen_bool(0.7) {
        vec![rng.gen_range(2..6), rng.gen_range(2..6)]
    } else {
        vec![
            rng.gen_range(2..4),
            rng.gen_range(2..4),
            rng.gen_range(2..4),
        ]
    }
}

fn with_channels(c: usize, dims: &[usize]) -> Vec<usize> {
    let mut s = vec![c];
    s.extend_from_slice(dims);
    s
}

pub fn elementwise_binary_ops() -> Result<(), String> {
    run_instances("add/sub/mul", |seed| {
        let mut rng = seeded(seed);
        let shape = with_channels(rng.gen_range(1..3), &random_dims(&mut rng));
        let a = uniform(shape.clone(), -2.0, 2.0, &mut rng);
        let b = uniform(shape, -2.0, 2.0, &mut rng);
        check(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            project(t, s, seed)
        })?;
        check(&[a.clone(), b.clone()], |t, v| {
            let s = t.sub(v[0], v[1]).unwrap();
            project(t, s, seed)
        })?;
        check(&[a, b], |t, v| {
            let s = t.mul(v[0], v[1]).unwrap();
            project(t, s, seed)
        })
    })
}

pub fn elementwise_unary_ops() -> Result<(), String> {
    run_instances("scale/exp/leaky_relu", |seed| {
        let mut rng = seeded(seed);
        let shape = with_channels(rng.gen_range(1..3), &random_dims(&mut rng));
        let a = uniform(shape.clone(), -2.0, 2.0, &mut rng);
        let k = rng.gen_range(-3.0..3.0);
        check(&[a.clone()], |t, v| {
            let s = t.scale(v[0], k);
            project(t, s, seed)
        })?;
        check(&[a], |t, v| {
            let s = t.exp(v[0]);
            project(t, s, seed)
        })?;
        // keep clear of the kink at zero
        let data = uniform(shape.clone(), 0.05, 2.0, &mut rng)
            .data()
            .iter()
            .map(|&x| if rng.gen_bool(0.5) { x } else { -x })
            .collect();
        let b = Tensor::new(shape, data).unwrap();
        check(&[b], |t, v| {
            let s = t.leaky_relu(v[0], 0.2);
            project(t, s, seed)
        })
    })
}

pub fn reductions() -> Result<(), String> {
    run_instances("sum/sum_squares/weighted_sum", |seed| {
        let mut rng = seeded(seed);
        let shape = with_channels(2, &random_dims(&mut rng));
        let a = uniform(shape, -2.0, 2.0, &mut rng);
        check(&[a.clone()], |t, v| t.sum(v[0]))?;
        check(&[a.clone()], |t, v| t.sum_squares(v[0]))?;
        check(&[a], |t, v| project(t, v[0], seed + 1))
    })
}

pub fn laplacian_quadratic() -> Result<(), String> {
    run_instances("laplacian_quadratic", |seed| {
        let mut rng = seeded(seed);
        let dims = random_dims(&mut rng);
        let graph = Arc::new(make_laplacian(&GridShape::new(&dims).unwrap()));
        let a = uniform(with_channels(dims.len(), &dims), -2.0, 2.0, &mut rng);
        check(&[a], |t, v| {
            t.laplacian_quadratic(v[0], graph.clone()).unwrap()
        })
    })
}

pub fn resample_source_and_displacement() -> Result<(), String> {
    run_instances("resample", |seed| {
        let mut rng = seeded(seed);
        let dims = random_dims(&mut rng);
        let nd = dims.len();
        let c = rng.gen_range(1..3);
        let src = uniform(with_channels(c, &dims), -1.0, 1.0, &mut rng);
        // displacements reaching outside the grid exercise edge clamping
        let disp = off_grid(with_channels(nd, &dims), -2.0, 2.0, &mut rng);
        check(&[src, disp], |t, v| {
            let s = t.resample(v[0], v[1]).unwrap();
            project(t, s, seed)
        })
    })
}

pub fn resample_field_through_itself() -> Result<(), String> {
    run_instances("compose", |seed| {
        let mut rng = seeded(seed);
        let dims = random_dims(&mut rng);
        let nd = dims.len();
        let a = off_grid(with_channels(nd, &dims), -1.0, 1.0, &mut rng);
        let b = off_grid(with_channels(nd, &dims), -1.0, 1.0, &mut rng);
        check(&[a.clone(), b], |t, v| {
            let s = t.compose(v[0], v[1]).unwrap();
            project(t, s, seed)
        })?;
        check(&[a], |t, v| {
            let s = t.compose(v[0], v[0]).unwrap();
            project(t, s, seed)
        })
    })
}

pub fn scaling_and_squaring() -> Result<(), String> {
    run_instances("integrate_ss", |seed| {
        let mut rng = seeded(seed);
        let dims = random_dims(&mut rng);
        let shape = GridShape::new(&dims).unwrap();
        let v = smooth_random_field(&shape, 1.5, 1.0, &mut rng);
        let steps = rng.gen_range(1..5);
        check(&[field_tensor(&v)], |t, x| {
            let s = t.integrate_ss(x[0], steps).unwrap();
            project(t, s, seed)
        })
    })
}

pub fn convolution_input_weight_bias() -> Result<(), String> {
    run_instances("conv", |seed| {
        let mut rng = seeded(seed);
        let dims: Vec<usize> = if rng.gen_bool(0.7) {
            vec![rng.gen_range(3..7), rng.gen_range(3..7)]
        } else {
            vec![
                rng.gen_range(2..5),
                rng.gen_range(2..5),
                rng.gen_range(2..5),
            ]
        };
        let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3));
        let k = if rng.gen_bool(0.8) { 3 } else { 1 };
        let stride = rng.gen_range(1..3);
        let input = uniform(with_channels(cin, &dims), -1.0, 1.0, &mut rng);
        let mut wshape = vec![cout, cin];
        wshape.extend(std::iter::repeat(k).take(dims.len()));
        let weight = uniform(wshape, -1.0, 1.0, &mut rng);
        let bias = uniform(vec![cout], -1.0, 1.0, &mut rng);
        check(&[input, weight, bias], |t, v| {
            let s = t.conv(v[0], v[1], v[2], stride).unwrap();
            project(t, s, seed)
        })
    })
}

pub fn upsample_and_concat() -> Result<(), String> {
    run_instances("upsample2/concat", |seed| {
        let mut rng = seeded(seed);
        let dims = random_dims(&mut rng);
        let a = uniform(
            with_channels(rng.gen_range(1..3), &dims),
            -1.0,
            1.0,
            &mut rng,
        );
        let b = uniform(
            with_channels(rng.gen_range(1..3), &dims),
            -1.0,
            1.0,
            &mut rng,
        );
        check(&[a.clone()], |t, v| {
            let s = t.upsample2(v[0]);
            project(t, s, seed)
        })?;
        check(&[a, b], |t, v| {
            let s = t.concat(v[0], v[1]).unwrap();
            project(t, s, seed)
        })
    })
}

fn loss_instance(seed: u64, steps: u32) -> Result<(), String> {
    let mut rng = seeded(seed);
    let shape = GridShape::new(&[8, 8]).unwrap();
    let x = ScalarImage::new(
        shape.clone(),
        (0..64).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let y = ScalarImage::new(
        shape.clone(),
        (0..64).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let mu = smooth_random_field(&shape, 1.2, 1.0, &mut rng);
    let lv_data: Vec<f64> = (0..128).map(|_| rng.gen_range(-4.0..-1.0)).collect();
    let lv = VectorField::new(shape.clone(), lv_data).unwrap();
    let k = rng.gen_range(1..3);
    let noise = draw_noise(&shape, k, &mut rng);
    let prior = PriorSpec::new(rng.gen_range(0.5..5.0), &shape).unwrap();
    let lik = LikelihoodSpec::new(0.05f64.powi(2)).unwrap();
    let leaves = [
        image_tensor(&x),
        image_tensor(&y),
        field_tensor(&mu),
        field_tensor(&lv),
    ];
    check(&leaves, |t, v| {
        record_elbo(t, v[0], v[1], v[2], v[3], &noise, &prior, &lik, steps)
            .unwrap()
            .total
    })
}

pub fn full_loss_on_8x8_pairs() -> Result<(), String> {
    run_instances("full loss", |seed| loss_instance(seed, 7))
}

pub fn full_loss_with_four_squaring_steps() -> Result<(), String> {
    run_instances("full loss T=4", |seed| loss_instance(seed + 1000, 4))
}

pub fn network_parameter_gradient() -> Result<(), String> {
    let shape = GridShape::new(&[16, 16]).unwrap();
    let spec = NetworkSpec {
        first_filters: 3,
        down_filters: 4,
        up_filters: 4,
        ..Default::default()
    };
    let mut rng = seeded(17);
    let img = |rng: &mut Rng| {
        ScalarImage::new(
            shape.clone(),
            (0..256).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    };
    let pair = ImagePair {
        moving: img(&mut rng),
        fixed: img(&mut rng),
    };
    let prior = PriorSpec::new(3.0, &shape).unwrap();
    let lik = LikelihoodSpec::new(0.1f64.powi(2)).unwrap();
    let noise = draw_noise(&shape, 1, &mut rng);
    let mut net = Network::new(spec, 4).unwrap();
    // move the heads away from their all-zero start so every layer is exercised
    for p in net.params_mut().iter_mut() {
        if *p == 0.0 {
            *p = rng.gen_range(-0.05..0.05);
        } else if *p == -10.0 {
            *p = -3.0;
        }
    }
    let (_, grad) = net.loss_and_grad(&pair, &prior, &lik, 7, &noise).unwrap();
    let n = net.n_params();
    for _ in 0..INSTANCES {
        let j = rng.gen_range(0..n);
        let base = net.params()[j];
        let value_at = |p: f64| {
            let mut m = net.clone();
            m.params_mut()[j] = p;
            m.loss_and_grad(&pair, &prior, &lik, 7, &noise)
                .unwrap()
                .0
                .total
        };
        let central = |h: f64| (value_at(base + h) - value_at(base - h)) / (2.0 * h);
        let fd = central(H);
        if !close(grad[j], fd) && !FALLBACK_H.iter().all(|&h| close(grad[j], central(h))) {
            return Err(format!(
                "parameter {j}: analytic {} vs numeric {fd}",
                grad[j]
            ));
        }
    }
    Ok(())
}

/// Every suite with a display name.
pub const SUITES: &[(&str, fn() -> Result<(), String>)] = &[
    ("elementwise_binary_ops", elementwise_binary_ops),
    ("elementwise_unary_ops", elementwise_unary_ops),
    ("reductions", reductions),
    ("laplacian_quadratic", laplacian_quadratic),
    (
        "resample_source_and_displacement",
        resample_source_and_displacement,
    ),
    (
        "resample_field_through_itself",
        resample_field_through_itself,
    ),
    ("scaling_and_squaring", scaling_and_squaring),
    (
        "convolution_input_weight_bias",
        convolution_input_weight_bias,
    ),
    ("upsample_and_concat", upsample_and_concat),
    ("full_loss_on_8x8_pairs", full_loss_on_8x8_pairs),
    (
        "full_loss_with_four_squaring_steps",
        full_loss_with_four_squaring_steps,
    ),
    ("network_parameter_gradient", network_parameter_gradient),
];
