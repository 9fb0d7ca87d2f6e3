//! Amortized inference: a small convolutional encoder-decoder mapping an
//! image pair to posterior parameters, trained without ground truth on the
//! same loss as per-pair registration.
//!
//! Layout: a stride-one convolution, `levels` stride-two convolutions, then
//! for each level a nearest-neighbor ×2 upsample, concatenation with the
//! encoder feature map of matching size and a stride-one convolution. Two
//! linear heads produce `μ` and `log σ²` at full resolution. All hidden
//! convolutions are followed by a leaky ReLU.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{GridShape, ScalarImage, VectorField};
use crate::infer::{
    map_deformation, RegistrationResult, DEFAULT_INIT_LOG_VAR, DEFAULT_LAMBDA, DEFAULT_SIGMA,
};
use crate::model::{
    draw_noise, image_tensor, record_elbo, LikelihoodSpec, LossBreakdown, PosteriorParams,
    PriorSpec,
};
use crate::optim::Adam;
use crate::rng::{derive_seed, seeded};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    /// Spatial dimensionality (2 or 3).
    pub ndim: usize,
    /// Number of stride-two downsampling stages.
    pub levels: usize,
    pub first_filters: usize,
    pub down_filters: usize,
    pub up_filters: usize,
    pub kernel: usize,
    /// Negative-side slope of the leaky ReLU.
    pub slope: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            ndim: 2,
            levels: 2,
            first_filters: 16,
            down_filters: 32,
            up_filters: 32,
            kernel: 3,
            slope: 0.2,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.ndim) {
            return Err(Error::InvalidArgument(format!(
                "network ndim must be 2 or 3, got {}",
                self.ndim
            )));
        }
        if self.levels == 0
            || self.first_filters == 0
            || self.down_filters == 0
            || self.up_filters == 0
        {
            return Err(Error::InvalidArgument(
                "levels and filter counts must be positive".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        if !self.slope.is_finite() {
            return Err(Error::InvalidArgument(
                "activation slope must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Checks that every extent is divisible by `2^levels`.
    pub fn check_shape(&self, shape: &GridShape) -> Result<()> {
        if shape.ndim() != self.ndim {
            return Err(Error::ShapeMismatch(format!(
                "network is {}D, image is {}",
                self.ndim, shape
            )));
        }
        let f = 1usize << self.levels;
        if shape.dims().iter().any(|&e| e % f != 0) {
            return Err(Error::InvalidShape {
                dims: shape.dims().to_vec(),
                reason: format!(
                    "extents must be divisible by {f} for {} levels",
                    self.levels
                ),
            });
        }
        Ok(())
    }

    /// `(name, cin, cout)` for every convolution, in parameter order.
    fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = vec![("enc0".to_string(), 2, self.first_filters)];
        let mut c = self.first_filters;
        for k in 1..=self.levels {
            out.push((format!("down{k}"), c, self.down_filters));
            c = self.down_filters;
        }
        for k in (0..self.levels).rev() {
            let skip = if k == 0 {
                self.first_filters
            } else {
                self.down_filters
            };
            out.push((format!("up{k}"), c + skip, self.up_filters));
            c = self.up_filters;
        }
        out.push(("mu".to_string(), c, self.ndim));
        out.push(("log_var".to_string(), c, self.ndim));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    name: String,
    weight_shape: Vec<usize>,
    weight_offset: usize,
    bias_offset: usize,
    cout: usize,
}

impl Layer {
    fn weight_len(&self) -> usize {
        self.weight_shape.iter().product()
    }
}

/// Network parameters in a single flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// An image pair for training or inference. Carries no ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub moving: ScalarImage,
    pub fixed: ScalarImage,
}

struct Forward {
    mu: Var,
    log_var: Var,
    /// Weight and bias leaves in parameter order.
    params: Vec<(Var, Var)>,
}

impl Network {
    /// He-initialized hidden layers; both heads start with zero weights, the
    /// `μ` head with zero bias and the log-variance head with bias
    /// [`DEFAULT_INIT_LOG_VAR`]. Parameters are rounded to `f32`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        for (name, cin, cout) in spec.layers() {
            let mut weight_shape = vec![cout, cin];
            weight_shape.extend(std::iter::repeat(spec.kernel).take(spec.ndim));
            let len: usize = weight_shape.iter().product();
            layers.push(Layer {
                name,
                weight_shape,
                weight_offset: offset,
                bias_offset: offset + len,
                cout,
            });
            offset += len + cout;
        }
        let mut params = vec![0.0; offset];
        let mut rng = seeded(seed);
        for layer in &layers {
            let (w, b) = (layer.weight_offset, layer.bias_offset);
            match layer.name.as_str() {
                "mu" => {}
                "log_var" => params[b..b + layer.cout].fill(DEFAULT_INIT_LOG_VAR),
                _ => {
                    let fan_in = layer.weight_len() / layer.cout;
                    let gain = 2.0 / (1.0 + spec.slope * spec.slope);
                    let normal =
                        Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                    for p in &mut params[w..w + layer.weight_len()] {
                        *p = normal.sample(&mut rng) as f32 as f64;
                    }
                }
            }
        }
        Ok(Self {
            spec,
            layers,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Replaces all parameters; the length must match the architecture.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "network has {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        self.params = params;
        Ok(())
    }

    fn record(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Forward> {
        let mut leaves = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = &self.params[l.weight_offset..l.weight_offset + l.weight_len()];
            let b = &self.params[l.bias_offset..l.bias_offset + l.cout];
            let wv = tape.leaf(Tensor::new(l.weight_shape.clone(), w.to_vec())?);
            let bv = tape.leaf(Tensor::new(vec![l.cout], b.to_vec())?);
            leaves.push((wv, bv));
        }
        let slope = self.spec.slope;
        let conv =
            |tape: &mut Tape, input: Var, i: usize, stride: usize, act: bool| -> Result<Var> {
                let (w, b) = leaves[i];
                let out = tape.conv(input, w, b, stride)?;
                Ok(if act {
                    tape.leaky_relu(out, slope)
                } else {
                    out
                })
            };
        let input = tape.concat(x, y)?;
        let mut skips = vec![conv(tape, input, 0, 1, true)?];
        for k in 1..=self.spec.levels {
            let prev = *skips.last().expect("non-empty");
            skips.push(conv(tape, prev, k, 2, true)?);
        }
        let mut h = skips.pop().expect("non-empty");
        let mut li = self.spec.levels + 1;
        while let Some(skip) = skips.pop() {
            let up = tape.upsample2(h);
            let cat = tape.concat(up, skip)?;
            h = conv(tape, cat, li, 1, true)?;
            li += 1;
        }
        let mu = conv(tape, h, li, 1, false)?;
        let log_var = conv(tape, h, li + 1, 1, false)?;
        Ok(Forward {
            mu,
            log_var,
            params: leaves,
        })
    }

    fn check_pair(&self, x: &ScalarImage, y: &ScalarImage) -> Result<()> {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch(format!(
                "moving {} vs fixed {}",
                x.shape(),
                y.shape()
            )));
        }
        self.spec.check_shape(x.shape())
    }

    /// Posterior parameters for the pair `(x, y)`.
    pub fn forward(&self, x: &ScalarImage, y: &ScalarImage) -> Result<PosteriorParams> {
        self.check_pair(x, y)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(image_tensor(x));
        let yv = tape.leaf(image_tensor(y));
        let f = self.record(&mut tape, xv, yv)?;
        let shape = x.shape().clone();
        let mu = VectorField::new(shape.clone(), tape.value(f.mu).data().to_vec())?;
        let log_var = VectorField::new(shape, tape.value(f.log_var).data().to_vec())?;
        PosteriorParams::new(mu, log_var)
    }

    /// Loss of one pair and its gradient w.r.t. all parameters.
    pub fn loss_and_grad(
        &self,
        pair: &ImagePair,
        prior: &PriorSpec,
        likelihood: &LikelihoodSpec,
        steps: u32,
        noise: &[VectorField],
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        self.check_pair(&pair.moving, &pair.fixed)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(image_tensor(&pair.moving));
        let yv = tape.leaf(image_tensor(&pair.fixed));
        let f = self.record(&mut tape, xv, yv)?;
        let vars = record_elbo(
            &mut tape, xv, yv, f.mu, f.log_var, noise, prior, likelihood, steps,
        )?;
        let grads = tape.backward(vars.total)?;
        let mut g = vec![0.0; self.params.len()];
        for (l, &(w, b)) in self.layers.iter().zip(&f.params) {
            if let Some(gw) = grads.get(w) {
                g[l.weight_offset..l.weight_offset + l.weight_len()].copy_from_slice(gw);
            }
            if let Some(gb) = grads.get(b) {
                g[l.bias_offset..l.bias_offset + l.cout].copy_from_slice(gb);
            }
        }
        Ok((vars.breakdown(&tape), g))
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub lambda: f64,
    pub sigma2: f64,
    /// Scaling-and-squaring steps.
    pub steps: u32,
    /// Posterior samples per pair.
    pub samples: usize,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            lambda: DEFAULT_LAMBDA,
            sigma2: DEFAULT_SIGMA * DEFAULT_SIGMA,
            steps: crate::deform::DEFAULT_SQUARING_STEPS,
            samples: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
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

/// Mean loss of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// Network, optimizer state and progress; everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub net: Network,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(
            net.n_params(),
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.epsilon,
        )
        .with_f32_state();
        Ok(Self {
            net,
            adam,
            config,
            epoch: 0,
        })
    }

    /// One pass over `data`. Shuffling and noise depend only on the seed and
    /// the epoch index, so a resumed run repeats an uninterrupted one.
    pub fn run_epoch(&mut self, data: &[ImagePair]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let shape = data[0].moving.shape().clone();
        let prior = PriorSpec::new(self.config.lambda, &shape)?;
        let lik = LikelihoodSpec::new(self.config.sigma2)?;
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeded(derive_seed(self.config.seed, 2 * epoch as u64)));
        let mut noise_rng = seeded(derive_seed(self.config.seed, 2 * epoch as u64 + 1));

        let mut losses = Vec::with_capacity(data.len());
        for (batch, idx) in order.chunks(self.config.batch_size).enumerate() {
            let mut grad = vec![0.0; self.net.n_params()];
            for &i in idx {
                let pair = &data[i];
                if pair.moving.shape() != &shape {
                    return Err(Error::ShapeMismatch(format!(
                        "pair {i} has shape {}, expected {shape}",
                        pair.moving.shape()
                    )));
                }
                let noise = draw_noise(&shape, self.config.samples, &mut noise_rng);
                let (loss, g) =
                    self.net
                        .loss_and_grad(pair, &prior, &lik, self.config.steps, &noise)?;
                if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        batch,
                        loss: loss.total,
                    });
                }
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b / idx.len() as f64;
                }
                losses.push(loss);
            }
            self.adam.update(&mut self.net.params, &grad);
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch,
            loss: LossBreakdown::mean(&losses),
        })
    }

    /// Runs the remaining epochs up to `config.epochs`, calling `on_epoch`
    /// after each one.
    pub fn train<F>(&mut self, data: &[ImagePair], mut on_epoch: F) -> Result<Vec<EpochLog>>
    where
        F: FnMut(&Trainer, &EpochLog) -> Result<()>,
    {
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let log = self.run_epoch(data)?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Whether a checkpoint is due after the epoch just completed.
    pub fn checkpoint_due(&self) -> bool {
        let every = self.config.checkpoint_every;
        self.epoch == self.config.epochs || (every > 0 && self.epoch % every == 0)
    }
}

/// Registration of a new pair by a single network evaluation.
pub fn amortized_register(
    net: &Network,
    x: &ScalarImage,
    y: &ScalarImage,
    steps: u32,
) -> Result<RegistrationResult> {
    let posterior = net.forward(x, y)?;
    let phi_map = map_deformation(&posterior, steps)?;
    Ok(RegistrationResult {
        posterior,
        phi_map,
        loss_trace: Vec::new(),
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DFRGCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    spec: NetworkSpec,
    config: TrainConfig,
    epoch: usize,
    adam_step: u64,
    /// Blob names and element counts, in file order.
    blobs: Vec<(String, usize)>,
}

fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint payload: {e}")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

impl Trainer {
    /// Serializes the trainer: magic, version, header length, JSON header,
    /// then little-endian `f32` blobs for parameters and both Adam moments.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let n = self.net.n_params();
        let header = CheckpointHeader {
            spec: self.net.spec.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            adam_step: self.adam.step,
            blobs: vec![
                ("params".into(), n),
                ("adam_m".into(), n),
                ("adam_v".into(), n),
            ],
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        write_f32s(w, &self.net.params)?;
        write_f32s(w, &self.adam.m)?;
        write_f32s(w, &self.adam.v)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("not a checkpoint: file too short".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        r.read_exact(&mut word)?;
        let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut json)
            .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let mut net = Network::new(header.spec, 0)?;
        let n = net.n_params();
        let expected = ["params", "adam_m", "adam_v"];
        if header.blobs.len() != 3
            || header
                .blobs
                .iter()
                .zip(expected)
                .any(|((name, len), e)| name != e || *len != n)
        {
            return Err(Error::Format(format!(
                "checkpoint blobs {:?} do not match the architecture ({n} parameters)",
                header.blobs
            )));
        }
        net.set_params(read_f32s(r, n)?)?;
        let mut trainer = Trainer::new(net, header.config)?;
        trainer.adam.m = read_f32s(r, n)?;
        trainer.adam.v = read_f32s(r, n)?;
        trainer.adam.step = header.adam_step;
        trainer.epoch = header.epoch;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                rest.len()
            )));
        }
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }
}
