//! Generative model and variational objective.
//!
//! Prior `z ~ N(0, (λL)⁻¹)` with `L` the grid Laplacian, likelihood
//! `x ~ N(y ∘ φ_z, σ²I)`, diagonal Gaussian posterior `q(z | x; y)`. The loss
//! is the negative evidence lower bound with additive constants dropped:
//!
//! ```text
//! total = 1/(2σ²K) Σ_k ‖x − y ∘ φ_{z_k}‖²  +  ½ [ λ Σ_j deg_j σ²_j − Σ_j log σ²_j + λ μᵀLμ ]
//! ```
//!
//! The dropped constants are `½ N log 2πσ²` from the likelihood and the
//! prior/posterior log-partition terms (`½ log|λL|` and `-N/2`), none of which
//! depend on the posterior parameters. Note that for a diagonal posterior
//! covariance `tr(λLΣ) = tr(λDΣ)`, since `L` and `D` share their diagonal.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::deform::{integrate_ss, warp};
use crate::error::{Error, Result};
use crate::grid::{make_laplacian, GridShape, LaplacianGraph, ScalarImage, VectorField};
use crate::rng::{normal_field, Rng};

/// Laplacian precision prior `Λ = λL`.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    lambda: f64,
    graph: Arc<LaplacianGraph>,
    degree_weights: Arc<Vec<f64>>,
}

impl PriorSpec {
    pub fn new(lambda: f64, shape: &GridShape) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior precision λ must be positive, got {lambda}"
            )));
        }
        let graph = make_laplacian(shape);
        let deg: Vec<f64> = graph.degree().iter().map(|&d| d as f64).collect();
        let degree_weights = (0..shape.ndim())
            .flat_map(|_| deg.iter().copied())
            .collect();
        Ok(Self {
            lambda,
            graph: Arc::new(graph),
            degree_weights: Arc::new(degree_weights),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn graph(&self) -> &LaplacianGraph {
        &self.graph
    }

    pub fn shape(&self) -> &GridShape {
        self.graph.shape()
    }
}

/// Image-noise variance of the likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodSpec {
    sigma2: f64,
}

impl LikelihoodSpec {
    pub fn new(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise variance σ² must be positive, got {sigma2}"
            )));
        }
        Ok(Self { sigma2 })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
}

/// Mean and log-variance of the diagonal Gaussian posterior over velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mu: VectorField,
    pub log_var: VectorField,
}

impl PosteriorParams {
    pub fn new(mu: VectorField, log_var: VectorField) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(Error::ShapeMismatch(format!(
                "posterior mean {} vs log-variance {}",
                mu.shape(),
                log_var.shape()
            )));
        }
        Ok(Self { mu, log_var })
    }

    /// Zero mean, constant log-variance.
    pub fn initial(shape: &GridShape, log_var: f64) -> Self {
        let lv = vec![log_var; shape.ndim() * shape.len()];
        Self {
            mu: VectorField::zeros(shape.clone()),
            log_var: VectorField::new(shape.clone(), lv).expect("finite initial log-variance"),
        }
    }

    pub fn shape(&self) -> &GridShape {
        self.mu.shape()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.data().iter().map(|s| s.exp()).collect()
    }
}

/// Components of the loss; `total = recon + ½(kl_trace − kl_logdet + kl_smooth)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_trace: f64,
    pub kl_logdet: f64,
    pub kl_smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn kl(&self) -> f64 {
        0.5 * (self.kl_trace - self.kl_logdet + self.kl_smooth)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon,
            self.kl_trace,
            self.kl_logdet,
            self.kl_smooth,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Componentwise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.recon += b.recon;
            m.kl_trace += b.kl_trace;
            m.kl_logdet += b.kl_logdet;
            m.kl_smooth += b.kl_smooth;
            m.total += b.total;
        }
        m.recon /= n;
        m.kl_trace /= n;
        m.kl_logdet /= n;
        m.kl_smooth /= n;
        m.total /= n;
        m
    }
}

/// The three KL pieces of the loss, before the ½ factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlTerms {
    pub trace: f64,
    pub logdet: f64,
    pub smooth: f64,
}

impl KlTerms {
    /// `½(trace − logdet + smooth)`.
    pub fn contribution(&self) -> f64 {
        0.5 * (self.trace - self.logdet + self.smooth)
    }
}

/// Reparameterized draw `z = μ + exp(½ log σ²) ⊙ ε`.
pub fn sample_z(post: &PosteriorParams, noise: &VectorField) -> Result<VectorField> {
    if noise.shape() != post.shape() {
        return Err(Error::ShapeMismatch(format!(
            "noise {} vs posterior {}",
            noise.shape(),
            post.shape()
        )));
    }
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.log_var.data())
        .zip(noise.data())
        .map(|((m, s), e)| m + (0.5 * s).exp() * e)
        .collect();
    VectorField::new(post.shape().clone(), data)
}

/// `1/(2σ²K) Σ_k ‖x − y ∘ exp(z_k)‖²`.
pub fn recon_term(
    x: &ScalarImage,
    y: &ScalarImage,
    z_samples: &[VectorField],
    sigma2: f64,
    steps: u32,
) -> Result<f64> {
    if z_samples.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one velocity sample".into(),
        ));
    }
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "images {} vs {}",
            x.shape(),
            y.shape()
        )));
    }
    let mut total = 0.0;
    for z in z_samples {
        let phi = integrate_ss(z, steps)?;
        let w = warp(y, &phi)?;
        total += x
            .values()
            .iter()
            .zip(w.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / (2.0 * sigma2 * z_samples.len() as f64))
}

/// Closed-form KL pieces for the diagonal posterior against the Laplacian prior.
pub fn kl_term(post: &PosteriorParams, prior: &PriorSpec) -> Result<KlTerms> {
    if post.shape() != prior.shape() {
        return Err(Error::ShapeMismatch(format!(
            "posterior {} vs prior {}",
            post.shape(),
            prior.shape()
        )));
    }
    let trace = prior.lambda
        * post
            .log_var
            .data()
            .iter()
            .zip(prior.degree_weights.iter())
            .map(|(s, d)| d * s.exp())
            .sum::<f64>();
    let logdet = post.log_var.data().iter().sum();
    let smooth = prior.lambda * prior.graph.quadratic_channels(post.mu.data());
    Ok(KlTerms {
        trace,
        logdet,
        smooth,
    })
}

pub fn image_tensor(img: &ScalarImage) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape().dims());
    Tensor::new(shape, img.values().to_vec()).expect("image tensor shape")
}

pub fn field_tensor(f: &VectorField) -> Tensor {
    let mut shape = vec![f.ndim()];
    shape.extend_from_slice(f.shape().dims());
    Tensor::new(shape, f.data().to_vec()).expect("field tensor shape")
}

/// Loss nodes recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    pub recon: Var,
    pub kl_trace: Var,
    pub kl_logdet: Var,
    pub kl_smooth: Var,
    pub total: Var,
}

impl ElboVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            recon: tape.scalar(self.recon),
            kl_trace: tape.scalar(self.kl_trace),
            kl_logdet: tape.scalar(self.kl_logdet),
            kl_smooth: tape.scalar(self.kl_smooth),
            total: tape.scalar(self.total),
        }
    }
}

/// Records the loss on `tape` given image leaves `x`, `y` (`[1, spatial]`)
/// and posterior nodes `mu`, `log_var` (`[ndim, spatial]`), with one
/// standard-normal field per sample in `noise`. Both per-pair optimization
/// and network training go through this function.
#[allow(clippy::too_many_arguments)]
pub fn record_elbo(
    tape: &mut Tape,
    x: Var,
    y: Var,
    mu: Var,
    log_var: Var,
    noise: &[VectorField],
    prior: &PriorSpec,
    likelihood: &LikelihoodSpec,
    steps: u32,
) -> Result<ElboVars> {
    if noise.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one noise sample (K ≥ 1)".into(),
        ));
    }
    let mut ssd: Option<Var> = None;
    let half_lv = tape.scale(log_var, 0.5);
    let std = tape.exp(half_lv);
    for eps in noise {
        let e = tape.leaf(field_tensor(eps));
        let spread = tape.mul(std, e)?;
        let z = tape.add(mu, spread)?;
        let phi = tape.integrate_ss(z, steps)?;
        let warped = tape.resample(y, phi)?;
        let diff = tape.sub(x, warped)?;
        let sq = tape.sum_squares(diff);
        ssd = Some(match ssd {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }
    let k = noise.len() as f64;
    let recon = tape.scale(ssd.expect("K ≥ 1"), 1.0 / (2.0 * likelihood.sigma2 * k));

    let var = tape.exp(log_var);
    let wsum = tape.weighted_sum(var, prior.degree_weights.clone())?;
    let kl_trace = tape.scale(wsum, prior.lambda);
    let kl_logdet = tape.sum(log_var);
    let quad = tape.laplacian_quadratic(mu, prior.graph.clone())?;
    let kl_smooth = tape.scale(quad, prior.lambda);

    let t1 = tape.sub(kl_trace, kl_logdet)?;
    let t2 = tape.add(t1, kl_smooth)?;
    let kl = tape.scale(t2, 0.5);
    let total = tape.add(recon, kl)?;
    Ok(ElboVars {
        recon,
        kl_trace,
        kl_logdet,
        kl_smooth,
        total,
    })
}

/// Loss value together with its gradients w.r.t. the posterior parameters.
#[derive(Debug, Clone)]
pub struct ElboEvaluation {
    pub loss: LossBreakdown,
    pub grad_mu: Vec<f64>,
    pub grad_log_var: Vec<f64>,
}

/// Evaluates the loss for explicit noise fields and back-propagates it.
pub fn elbo_with_noise(
    x: &ScalarImage,
    y: &ScalarImage,
    post: &PosteriorParams,
    prior: &PriorSpec,
    likelihood: &LikelihoodSpec,
    steps: u32,
    noise: &[VectorField],
) -> Result<ElboEvaluation> {
    if x.shape() != y.shape() || x.shape() != post.shape() || post.shape() != prior.shape() {
        return Err(Error::ShapeMismatch(format!(
            "x {}, y {}, posterior {}, prior {}",
            x.shape(),
            y.shape(),
            post.shape(),
            prior.shape()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(image_tensor(x));
    let yv = tape.leaf(image_tensor(y));
    let mu = tape.leaf(field_tensor(&post.mu));
    let lv = tape.leaf(field_tensor(&post.log_var));
    let vars = record_elbo(&mut tape, xv, yv, mu, lv, noise, prior, likelihood, steps)?;
    let grads = tape.backward(vars.total)?;
    Ok(ElboEvaluation {
        loss: vars.breakdown(&tape),
        grad_mu: grads.wrt(mu),
        grad_log_var: grads.wrt(lv),
    })
}

/// Draws `k` standard-normal fields from `rng`.
pub fn draw_noise(shape: &GridShape, k: usize, rng: &mut Rng) -> Vec<VectorField> {
    (0..k).map(|_| normal_field(shape, rng)).collect()
}

/// Negative ELBO with `k` reparameterized samples drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss(
    x: &ScalarImage,
    y: &ScalarImage,
    post: &PosteriorParams,
    prior: &PriorSpec,
    likelihood: &LikelihoodSpec,
    steps: u32,
    k: usize,
    rng: &mut Rng,
) -> Result<ElboEvaluation> {
    let noise = draw_noise(post.shape(), k, rng);
    elbo_with_noise(x, y, post, prior, likelihood, steps, &noise)
}
