//! Run configuration, read from a TOML file with every key optional.
//!
//! The default `lambda` suits the desk-scale synthetic grids. Full-resolution
//! 3D brain MRI with intensities in [0, 1] calls for `lambda = 70000`.
//!
//! ```toml
//! [model]
//! lambda = 3.0
//! sigma = 0.035
//!
//! [optimizer]
//! iterations = 500
//! ```

use std::path::Path;

use anyhow::Context;
use diffreg::deform::DEFAULT_SQUARING_STEPS;
use diffreg::infer::{OptimizerConfig, DEFAULT_INIT_LOG_VAR, DEFAULT_LAMBDA, DEFAULT_SIGMA};
use diffreg::net::{NetworkSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::output::Usage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub network: NetworkSpec,
}

/// Quantities shared by per-pair optimization and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub lambda: f64,
    /// Image noise standard deviation (not the variance).
    pub sigma: f64,
    /// Scaling-and-squaring steps.
    pub steps: u32,
    /// Posterior samples per loss evaluation.
    pub samples: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            sigma: DEFAULT_SIGMA,
            steps: DEFAULT_SQUARING_STEPS,
            samples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub init_log_var: f64,
    pub seed: u64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            step_size: d.step_size,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
            iterations: d.iterations,
            init_log_var: DEFAULT_INIT_LOG_VAR,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Keep a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
            seed: d.seed,
            checkpoint_every: d.checkpoint_every,
        }
    }
}

impl RunConfig {
    /// Reads a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Usage(format!("config {}: {e}", path.display())).into())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let (m, o) = (&self.model, &self.optimizer);
        OptimizerConfig {
            step_size: o.step_size,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            iterations: o.iterations,
            seed: o.seed,
            steps: m.steps,
            samples: m.samples,
            lambda: m.lambda,
            sigma2: m.sigma * m.sigma,
            init_log_var: o.init_log_var,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let (m, t) = (&self.model, &self.train);
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            seed: t.seed,
            lambda: m.lambda,
            sigma2: m.sigma * m.sigma,
            steps: m.steps,
            samples: m.samples,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.optimizer_config(), OptimizerConfig::default());
        assert_eq!(c.train_config(), TrainConfig::default());
        assert_eq!((c.model.steps, c.model.samples), (7, 1));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nlamda = 2.0\n").is_err());
        assert!(toml::from_str::<RunConfig>("[optimiser]\n").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c: RunConfig =
            toml::from_str("[model]\nlambda = 10.0\nsigma = 0.1\n[network]\nlevels = 1\n").unwrap();
        assert_eq!(c.model.lambda, 10.0);
        assert!((c.optimizer_config().sigma2 - 0.01).abs() < 1e-15);
        assert_eq!(c.network.levels, 1);
        assert_eq!(
            c.network.first_filters,
            NetworkSpec::default().first_filters
        );
    }

    #[test]
    fn roundtrips_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
