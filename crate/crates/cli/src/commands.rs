//! The subcommands. Each one resolves its configuration, writes `run.json`
//! and its artifacts, and leaves its inputs untouched.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use diffreg::deform::DeformationField;
use diffreg::eval::{
    aggregate, evaluate_registration, labels_csv, records_csv, summary_csv, EvalRecord,
};
use diffreg::grid::{GridShape, ScalarImage};
use diffreg::infer::{register_pair, RegistrationResult};
use diffreg::io;
use diffreg::net::{amortized_register, ImagePair, Network, Trainer};
use diffreg::synth::{generate_dataset, SynthSpec};
use serde_json::json;

use crate::config::RunConfig;
use crate::dataset::{self, PHI, TIMING};
use crate::output::{path_str, usage, write_atomic, RunRecord, Staging};

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Grid shape such as 64x64 or 32x32x32.
    #[arg(long)]
    pub shape: String,
    /// Number of pairs.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Base seed; pair seeds are derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub blobs: Option<usize>,
    /// RMS velocity magnitude in voxels.
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// Velocity blur in voxels.
    #[arg(long)]
    pub smoothing: Option<f64>,
    /// Intensity noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, env = "DIFFREG_OUT")]
    pub out: PathBuf,
}

pub fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let shape = GridShape::parse(&args.shape)?;
    let mut spec = SynthSpec::new(shape, args.seed);
    if let Some(b) = args.blobs {
        spec.n_blobs = b;
    }
    if let Some(a) = args.amplitude {
        spec.amplitude = a;
    }
    if let Some(s) = args.smoothing {
        spec.smoothing = s;
    }
    if let Some(s) = args.noise {
        spec.noise_sigma = s;
    }
    spec.validate()?;
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let stage = Staging::new(&args.out)?;
    let (pairs, manifest) = generate_dataset(&spec, args.n)?;
    let manifest = dataset::write_dataset(stage.path(), manifest, &pairs)?;
    RunRecord::new(
        "synth",
        json!({ "n": args.n }),
        &spec,
        json!({ "base": args.seed, "pairs": manifest.seeds }),
    )
    .write(stage.path())?;
    stage.commit()?;
    eprintln!("wrote {} pairs to {}", args.n, args.out.display());
    Ok(())
}

/// Either one explicit pair or every pair of a dataset.
#[derive(Debug, Args)]
pub struct PairInputs {
    /// Moving image (TensorFile).
    #[arg(long, requires = "fixed", conflicts_with = "data")]
    pub moving: Option<PathBuf>,
    /// Fixed image (TensorFile).
    #[arg(long, requires = "moving")]
    pub fixed: Option<PathBuf>,
    /// Dataset directory; every listed pair is processed into its own subdirectory.
    #[arg(long, env = "DIFFREG_DATA", required_unless_present = "moving")]
    pub data: Option<PathBuf>,
}

impl PairInputs {
    fn describe(&self) -> serde_json::Value {
        let p = |o: &Option<PathBuf>| o.as_deref().map(path_str);
        json!({ "moving": p(&self.moving), "fixed": p(&self.fixed), "data": p(&self.data) })
    }

    /// `(output subdirectory, moving, fixed)`; the subdirectory is empty for a single pair.
    fn load(&self) -> anyhow::Result<Vec<(String, ScalarImage, ScalarImage)>> {
        if let (Some(m), Some(f)) = (&self.moving, &self.fixed) {
            return Ok(vec![(
                String::new(),
                io::load_image(m)?,
                io::load_image(f)?,
            )]);
        }
        let data = self
            .data
            .as_deref()
            .ok_or_else(|| usage("pass --moving and --fixed, or --data"))?;
        dataset::pair_dirs(data)?
            .into_iter()
            .map(|(name, dir)| {
                let (m, f) = dataset::load_images(&dir)?;
                Ok((name, m, f))
            })
            .collect()
    }
}

/// Runs `register` on every input and writes each result.
fn register_each(
    inputs: &[(String, ScalarImage, ScalarImage)],
    root: &Path,
    timing: bool,
    mut register: impl FnMut(&ScalarImage, &ScalarImage) -> anyhow::Result<RegistrationResult>,
) -> anyhow::Result<()> {
    for (name, moving, fixed) in inputs {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir)?;
        let start = Instant::now();
        let res = register(moving, fixed).with_context(|| {
            format!(
                "registering {}",
                if name.is_empty() { "pair" } else { name }
            )
        })?;
        let seconds = start.elapsed().as_secs_f64();
        let folds = dataset::write_registration(&dir, moving, fixed, &res)?;
        if timing {
            std::fs::write(dir.join(TIMING), format!("{{\"seconds\": {seconds}}}\n"))?;
        }
        let label = if name.is_empty() {
            "pair".to_string()
        } else {
            name.clone()
        };
        eprintln!("{label}: {folds} non-positive Jacobian voxels, {seconds:.2} s");
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub inputs: PairInputs,
    /// TOML run configuration.
    #[arg(long, env = "DIFFREG_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Record wall-clock seconds per pair in timing.json.
    #[arg(long)]
    pub timing: bool,
    #[arg(long, env = "DIFFREG_OUT")]
    pub out: PathBuf,
}

pub fn register(args: &RegisterArgs) -> anyhow::Result<()> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    if let Some(s) = args.seed {
        config.optimizer.seed = s;
    }
    if let Some(i) = args.iterations {
        config.optimizer.iterations = i;
    }
    if let Some(l) = args.lambda {
        config.model.lambda = l;
    }
    let cfg = config.optimizer_config();
    cfg.validate()?;
    let inputs = args.inputs.load()?;
    let stage = Staging::new(&args.out)?;
    RunRecord::new(
        "register",
        args.inputs.describe(),
        &config,
        json!({ "optimizer": cfg.seed }),
    )
    .write(stage.path())?;
    register_each(&inputs, stage.path(), args.timing, |m, f| {
        Ok(register_pair(m, f, &cfg)?)
    })?;
    stage.commit()
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset directory.
    #[arg(long, env = "DIFFREG_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "DIFFREG_CONFIG")]
    pub config: Option<PathBuf>,
    /// Total number of epochs (including any already completed).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from `checkpoint.ckpt` in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, env = "DIFFREG_OUT")]
    pub out: PathBuf,
}

pub const CHECKPOINT: &str = "checkpoint.ckpt";
const EPOCH_CSV_HEADER: &str = "epoch,recon,kl_trace,kl_logdet,kl_smooth,total";

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    let tc = config.train_config();
    tc.validate()?;
    config.network.validate()?;

    let data: Vec<ImagePair> = dataset::pair_dirs(&args.data)?
        .into_iter()
        .map(|(_, dir)| {
            dataset::load_images(&dir).map(|(moving, fixed)| ImagePair { moving, fixed })
        })
        .collect::<anyhow::Result<_>>()?;
    config.network.check_shape(data[0].moving.shape())?;

    let ckpt = args.out.join(CHECKPOINT);
    let epoch_csv = args.out.join("epochs.csv");
    let (mut trainer, mut csv) = if args.resume {
        let mut t = Trainer::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        let mut saved = t.config.clone();
        saved.epochs = tc.epochs;
        saved.checkpoint_every = tc.checkpoint_every;
        if saved != tc || t.net.spec() != &config.network {
            return Err(usage(format!(
                "{} was written with a different configuration",
                ckpt.display()
            )));
        }
        if t.epoch > tc.epochs {
            return Err(usage(format!(
                "checkpoint is at epoch {}, beyond --epochs {}",
                t.epoch, tc.epochs
            )));
        }
        t.config = tc.clone();
        let csv = std::fs::read_to_string(&epoch_csv)
            .with_context(|| format!("reading {}", epoch_csv.display()))?;
        let kept: Vec<&str> = csv.lines().take(t.epoch + 1).collect();
        (t, kept.join("\n") + "\n")
    } else {
        if args.out.exists() && std::fs::read_dir(&args.out)?.next().is_some() {
            return Err(usage(format!(
                "{} is not empty; pass --resume to continue training",
                args.out.display()
            )));
        }
        std::fs::create_dir_all(&args.out)?;
        let net = Network::new(config.network.clone(), tc.seed)?;
        (
            Trainer::new(net, tc.clone())?,
            format!("{EPOCH_CSV_HEADER}\n"),
        )
    };

    let inputs = json!({ "data": path_str(&args.data), "resume": args.resume });
    RunRecord::new("train", inputs, &config, json!({ "train": tc.seed })).write(&args.out)?;
    trainer.train(&data, |t, log| {
        let l = &log.loss;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.epoch, l.recon, l.kl_trace, l.kl_logdet, l.kl_smooth, l.total
        ));
        save_checkpoint(t, &ckpt).map_err(|e| diffreg::Error::Format(format!("{e:#}")))?;
        if t.checkpoint_due() {
            std::fs::copy(
                &ckpt,
                args.out
                    .join(format!("checkpoint_epoch_{:04}.ckpt", t.epoch)),
            )?;
        }
        write_atomic(&epoch_csv, csv.as_bytes())
            .map_err(|e| diffreg::Error::Format(format!("{e:#}")))?;
        eprintln!("epoch {}: loss {:.3}", t.epoch, l.total);
        Ok(())
    })?;
    Ok(())
}

fn save_checkpoint(t: &Trainer, path: &Path) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    t.write_checkpoint(&mut buf)?;
    write_atomic(path, &buf)
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    /// Checkpoint written by `train`.
    #[arg(long, env = "DIFFREG_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub inputs: PairInputs,
    #[arg(long)]
    pub timing: bool,
    #[arg(long, env = "DIFFREG_OUT")]
    pub out: PathBuf,
}

pub fn apply(args: &ApplyArgs) -> anyhow::Result<()> {
    let trainer = Trainer::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let inputs = args.inputs.load()?;
    let stage = Staging::new(&args.out)?;
    let mut described = args.inputs.describe();
    described["checkpoint"] = json!(path_str(&args.checkpoint));
    let config =
        json!({ "network": trainer.net.spec(), "train": trainer.config, "epoch": trainer.epoch });
    RunRecord::new("apply", described, config, json!({})).write(stage.path())?;
    let steps = trainer.config.steps;
    register_each(&inputs, stage.path(), args.timing, |m, f| {
        Ok(amortized_register(&trainer.net, m, f, steps)?)
    })?;
    stage.commit()
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory with one subdirectory per method, each holding one
    /// `<pair>/phi.dfrg` per evaluated pair.
    #[arg(long)]
    pub results: PathBuf,
    /// Dataset with the ground-truth label maps.
    #[arg(long, env = "DIFFREG_DATA")]
    pub data: PathBuf,
    /// Also score the identity map on every pair of the dataset.
    #[arg(long)]
    pub identity: bool,
    #[arg(long, env = "DIFFREG_OUT")]
    pub out: PathBuf,
}

fn sorted_subdirs(dir: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push((
                entry.file_name().to_string_lossy().into_owned(),
                entry.path(),
            ));
        }
    }
    out.sort();
    Ok(out)
}

fn read_seconds(dir: &Path) -> anyhow::Result<Option<f64>> {
    let path = dir.join(TIMING);
    if !path.exists() {
        return Ok(None);
    }
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    Ok(v["seconds"].as_f64())
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let truth = dataset::pair_dirs(&args.data)?;
    let mut records = Vec::new();
    for (method, mdir) in sorted_subdirs(&args.results)? {
        for (pair_id, pdir) in sorted_subdirs(&mdir)? {
            let phi_path = pdir.join(PHI);
            if !phi_path.exists() {
                continue;
            }
            let gt = truth.iter().find(|(n, _)| *n == pair_id).ok_or_else(|| {
                anyhow::anyhow!(
                    "{} has no ground truth in {}",
                    pdir.display(),
                    args.data.display()
                )
            })?;
            let (ml, fl) = dataset::load_labels(&gt.1)?;
            let phi = io::load_deformation(&phi_path)?;
            records.push(evaluate_registration(
                &pair_id,
                &method,
                &ml,
                &fl,
                &phi,
                read_seconds(&pdir)?,
            )?);
        }
    }
    if records.is_empty() {
        anyhow::bail!("no registrations found under {}", args.results.display());
    }
    if args.identity {
        for (pair_id, dir) in &truth {
            let (ml, fl) = dataset::load_labels(dir)?;
            let id = DeformationField::identity(ml.shape().clone());
            records.push(evaluate_registration(
                pair_id, "identity", &ml, &fl, &id, None,
            )?);
        }
    }
    records.sort_by(|a, b| (&a.method, &a.pair_id).cmp(&(&b.method, &b.pair_id)));
    let summary = aggregate(&records)?;

    let stage = Staging::new(&args.out)?;
    let inputs = json!({ "results": path_str(&args.results), "data": path_str(&args.data), "identity": args.identity });
    RunRecord::new("eval", inputs, json!({}), json!({})).write(stage.path())?;
    std::fs::write(stage.path().join("pairs.csv"), records_csv(&records))?;
    std::fs::write(stage.path().join("summary.csv"), summary_csv(&summary))?;
    for row in &summary {
        let of_method: Vec<EvalRecord> = records
            .iter()
            .filter(|r| r.method == row.method)
            .cloned()
            .collect();
        std::fs::write(
            stage.path().join(format!("labels_{}.csv", row.method)),
            labels_csv(&of_method),
        )?;
        eprintln!(
            "{}: n = {}, mean Dice {:.4}",
            row.method, row.n, row.dice.mean
        );
    }
    stage.commit()
}
