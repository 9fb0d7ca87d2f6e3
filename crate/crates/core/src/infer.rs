//! Per-pair variational registration, MAP deformation and uncertainty maps.

use serde::{Deserialize, Serialize};

use crate::deform::{integrate_ss, DeformationField};
use crate::error::{Error, Result};
use crate::grid::{ScalarImage, VectorField};
use crate::model::{
    draw_noise, elbo_with_noise, sample_z, LikelihoodSpec, LossBreakdown, PosteriorParams,
    PriorSpec,
};
use crate::optim::Adam;
use crate::rng::{derive_seed, normal_field, seeded};

/// Image-noise standard deviation used by default (normalized intensities).
pub const DEFAULT_SIGMA: f64 = 0.035;
/// Prior precision used by default on desk-scale synthetic grids.
pub const DEFAULT_LAMBDA: f64 = 3.0;
/// Initial posterior log-variance.
pub const DEFAULT_INIT_LOG_VAR: f64 = -10.0;

/// Settings of per-pair optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Scaling-and-squaring steps.
    pub steps: u32,
    /// Posterior samples per loss evaluation.
    pub samples: usize,
    pub lambda: f64,
    pub sigma2: f64,
    pub init_log_var: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations: 500,
            seed: 0,
            steps: crate::deform::DEFAULT_SQUARING_STEPS,
            samples: 1,
            lambda: DEFAULT_LAMBDA,
            sigma2: DEFAULT_SIGMA * DEFAULT_SIGMA,
            init_log_var: DEFAULT_INIT_LOG_VAR,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument(
                "iterations must be at least 1".into(),
            ));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.samples == 0 {
            return Err(Error::InvalidArgument(
                "need at least one posterior sample".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument(
                "moment decay rates must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of a registration.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub posterior: PosteriorParams,
    pub phi_map: DeformationField,
    /// One entry per optimization iteration (empty for amortized inference).
    pub loss_trace: Vec<LossBreakdown>,
}

/// Fits the posterior for `x ≈ y ∘ φ` by Adam on the negative ELBO, starting
/// from zero mean and a constant log-variance.
pub fn register_pair(
    x: &ScalarImage,
    y: &ScalarImage,
    cfg: &OptimizerConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "moving {} vs fixed {}",
            x.shape(),
            y.shape()
        )));
    }
    let shape = x.shape().clone();
    let prior = PriorSpec::new(cfg.lambda, &shape)?;
    let lik = LikelihoodSpec::new(cfg.sigma2)?;
    let init = PosteriorParams::initial(&shape, cfg.init_log_var);
    let mut mu = init.mu.into_data();
    let mut log_var = init.log_var.into_data();
    let mut adam_mu = Adam::new(mu.len(), cfg.step_size, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut adam_lv = Adam::new(
        log_var.len(),
        cfg.step_size,
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
    );
    let mut rng = seeded(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let post = PosteriorParams::new(
            VectorField::new(shape.clone(), mu.clone())?,
            VectorField::new(shape.clone(), log_var.clone())?,
        )?;
        let noise = draw_noise(&shape, cfg.samples, &mut rng);
        let eval = elbo_with_noise(x, y, &post, &prior, &lik, cfg.steps, &noise)?;
        if !eval.loss.is_finite() {
            return Err(Error::Diverged {
                iteration,
                loss: eval.loss.total,
            });
        }
        trace.push(eval.loss);
        adam_mu.update(&mut mu, &eval.grad_mu);
        adam_lv.update(&mut log_var, &eval.grad_log_var);
        if mu.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                loss: f64::NAN,
            });
        }
    }

    let posterior = PosteriorParams::new(
        VectorField::new(shape.clone(), mu)?,
        VectorField::new(shape, log_var)?,
    )?;
    let phi_map = map_deformation(&posterior, cfg.steps)?;
    Ok(RegistrationResult {
        posterior,
        phi_map,
        loss_trace: trace,
    })
}

/// MAP deformation: the exponential of the posterior mean.
pub fn map_deformation(post: &PosteriorParams, steps: u32) -> Result<DeformationField> {
    integrate_ss(&post.mu, steps)
}

fn half_log_2pi(var: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * var).ln()
}

/// Per-component velocity uncertainty `½ log(2π σ²_q)`.
pub fn velocity_entropy_components(post: &PosteriorParams) -> Vec<ScalarImage> {
    let shape = post.shape();
    (0..shape.ndim())
        .map(|a| {
            let vals = post
                .log_var
                .component(a)
                .iter()
                .map(|s| half_log_2pi(s.exp()))
                .collect();
            ScalarImage::new(shape.clone(), vals).expect("finite log-variance")
        })
        .collect()
}

/// Velocity uncertainty averaged over vector components.
pub fn velocity_entropy(post: &PosteriorParams) -> ScalarImage {
    let comps = velocity_entropy_components(post);
    let n = post.shape().len();
    let nd = comps.len() as f64;
    let vals = (0..n)
        .map(|i| comps.iter().map(|c| c.values()[i]).sum::<f64>() / nd)
        .collect();
    ScalarImage::new(post.shape().clone(), vals).expect("finite entropy")
}

/// Header of the loss-trace CSV.
pub const LOSS_CSV_HEADER: &str = "iteration,recon,kl_trace,kl_logdet,kl_smooth,total";

/// Loss trace as CSV, one row per iteration counted from 0.
pub fn loss_trace_csv(trace: &[LossBreakdown]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            l.recon, l.kl_trace, l.kl_logdet, l.kl_smooth, l.total
        ));
    }
    out
}

/// Smallest variance used when taking logarithms of empirical variances.
pub const VARIANCE_FLOOR: f64 = 1e-300;

/// Per-voxel empirical variance of the displacement of `exp(z)` for
/// `z ~ q`, averaged over components. Sample `i` uses noise seeded by
/// `derive_seed(seed, i)`.
pub fn deformation_variance(
    post: &PosteriorParams,
    steps: u32,
    n_samples: usize,
    seed: u64,
) -> Result<ScalarImage> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples, got {n_samples}"
        )));
    }
    let shape = post.shape();
    let len = shape.ndim() * shape.len();
    let mut mean = vec![0.0; len];
    let mut m2 = vec![0.0; len];
    for i in 0..n_samples {
        let mut rng = seeded(derive_seed(seed, i as u64));
        let z = sample_z(post, &normal_field(shape, &mut rng))?;
        let u = integrate_ss(&z, steps)?.into_displacement().into_data();
        // Welford
        let k = (i + 1) as f64;
        for j in 0..len {
            let d = u[j] - mean[j];
            mean[j] += d / k;
            m2[j] += d * (u[j] - mean[j]);
        }
    }
    let n = shape.len();
    let nd = shape.ndim() as f64;
    let vals = (0..n)
        .map(|i| {
            (0..shape.ndim()).map(|a| m2[a * n + i]).sum::<f64>() / ((n_samples - 1) as f64 * nd)
        })
        .collect();
    ScalarImage::new(shape.clone(), vals)
}

/// Deformation uncertainty `½ log(2π Σ̂)` from the empirical variance.
pub fn deformation_uncertainty(
    post: &PosteriorParams,
    steps: u32,
    n_samples: usize,
    seed: u64,
) -> Result<ScalarImage> {
    let var = deformation_variance(post, steps, n_samples, seed)?;
    let vals = var
        .values()
        .iter()
        .map(|&v| half_log_2pi(v.max(VARIANCE_FLOOR)))
        .collect();
    ScalarImage::new(var.shape().clone(), vals)
}
