//! Synthetic image pairs with known deformations.
//!
//! A fixed image of soft-edged elliptical blobs on a flat background is drawn
//! together with its label map. Blobs are brighter at the center so that their
//! interiors carry some texture. A smooth random velocity field is integrated
//! into the ground-truth map `φ`, redrawing it while the map folds anywhere.
//! The moving image is the blob scene evaluated analytically at `φ(p)` plus
//! Gaussian noise, so that `moving ≈ fixed ∘ φ` exactly as the registration
//! model assumes.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::deform::{count_nonpositive_jacobian, integrate_ss, warp_labels, DeformationField};
use crate::error::{Error, Result};
use crate::grid::{GridShape, LabelMap, ScalarImage, VectorField};
use crate::rng::{derive_seed, seeded, smooth_random_field, standard_normal_vec, Rng};

pub const BACKGROUND_INTENSITY: f64 = 0.1;
/// Fractional intensity drop from a blob's center to its rim.
const SHADING: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub shape: GridShape,
    pub n_blobs: usize,
    /// Root-mean-square velocity magnitude, in voxels.
    pub amplitude: f64,
    /// Gaussian blur applied to the velocity noise, in voxels.
    pub smoothing: f64,
    /// Standard deviation of the additive intensity noise.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Squaring steps used to integrate the true velocity.
    pub steps: u32,
}

impl SynthSpec {
    pub fn new(shape: GridShape, seed: u64) -> Self {
        Self {
            shape,
            n_blobs: 8,
            amplitude: 3.0,
            smoothing: 3.0,
            noise_sigma: 0.035,
            seed,
            steps: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "amplitude must be non-negative, got {}",
                self.amplitude
            )));
        }
        if !(self.smoothing > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smoothing must be positive, got {}",
                self.smoothing
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.n_blobs == 0 {
            return Err(Error::InvalidArgument("need at least one blob".into()));
        }
        if self.shape.dims().iter().any(|&e| e < 16) {
            return Err(Error::InvalidArgument(format!(
                "synthetic grids need extents of at least 16, got {}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// One generated sample with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub moving: ScalarImage,
    pub fixed: ScalarImage,
    pub moving_labels: LabelMap,
    pub fixed_labels: LabelMap,
    pub true_velocity: VectorField,
    pub true_phi: DeformationField,
}

#[derive(Debug, Clone)]
struct Blob {
    center: Vec<f64>,
    radii: Vec<f64>,
    /// Rotation angle in the first two axes.
    angle: f64,
    intensity: f64,
}

impl Blob {
    /// Normalized ellipse radius: < 1 inside.
    fn radius_at(&self, q: &[f64]) -> f64 {
        let d: Vec<f64> = q.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let mut r = [d[0] * c + d[1] * s, -d[0] * s + d[1] * c, 0.0];
        if d.len() == 3 {
            r[2] = d[2];
        }
        r.iter()
            .zip(&self.radii)
            .map(|(x, ra)| (x / ra).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Soft membership with an edge roughly one voxel wide.
    fn membership(&self, q: &[f64]) -> f64 {
        let mean_r = self.radii.iter().sum::<f64>() / self.radii.len() as f64;
        let t = (1.0 - self.radius_at(q)) * mean_r / 0.75;
        1.0 / (1.0 + (-t).exp())
    }
}

fn draw_blobs(spec: &SynthSpec, rng: &mut Rng) -> Vec<Blob> {
    let dims = spec.shape.dims();
    let min_e = *dims.iter().min().unwrap() as f64;
    let nd = dims.len();
    let mut blobs: Vec<Blob> = Vec::new();
    let mut attempts = 0;
    while blobs.len() < spec.n_blobs && attempts < 2000 {
        attempts += 1;
        let radii: Vec<f64> = (0..nd).map(|_| rng.gen_range(0.06..0.14) * min_e).collect();
        let rmax = radii.iter().cloned().fold(0.0, f64::max);
        let margin = rmax + spec.amplitude + 2.0;
        if dims.iter().any(|&e| 2.0 * margin >= e as f64 - 1.0) {
            continue;
        }
        let center: Vec<f64> = dims
            .iter()
            .map(|&e| rng.gen_range(margin..(e as f64 - 1.0 - margin)))
            .collect();
        let clear = blobs.iter().all(|b| {
            let dist = b
                .center
                .iter()
                .zip(&center)
                .map(|(a, c)| (a - c).powi(2))
                .sum::<f64>()
                .sqrt();
            let brmax = b.radii.iter().cloned().fold(0.0, f64::max);
            dist > rmax + brmax + 3.0
        });
        if !clear {
            continue;
        }
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let intensity = rng.gen_range(0.45..0.95);
        blobs.push(Blob {
            center,
            radii,
            angle,
            intensity,
        });
    }
    blobs
}

fn scene_at(blobs: &[Blob], q: &[f64]) -> (f64, u32) {
    let mut value = BACKGROUND_INTENSITY;
    let mut label = 0;
    for (k, b) in blobs.iter().enumerate() {
        let r = b.radius_at(q).min(1.0);
        value += b.membership(q) * (b.intensity - BACKGROUND_INTENSITY) * (1.0 - SHADING * r * r);
        if b.radius_at(q) < 1.0 {
            label = k as u32 + 1;
        }
    }
    (value, label)
}

fn rms_scaled(v: VectorField, amplitude: f64) -> VectorField {
    let rms = (v.norm_sq() / v.shape().len() as f64).sqrt();
    if rms > 0.0 {
        v.scaled(amplitude / rms)
    } else {
        v
    }
}

/// Velocity draws whose integrated map folds are rejected and redrawn.
const MAX_WARP_DRAWS: usize = 1000;

/// Draws a smooth velocity with the requested RMS magnitude whose
/// exponential has a positive Jacobian determinant everywhere.
fn draw_warp(spec: &SynthSpec, rng: &mut Rng) -> Result<(VectorField, DeformationField)> {
    for _ in 0..MAX_WARP_DRAWS {
        let velocity = rms_scaled(
            smooth_random_field(&spec.shape, 1.0, spec.smoothing, rng),
            spec.amplitude,
        );
        let phi = integrate_ss(&velocity, spec.steps)?;
        if count_nonpositive_jacobian(&phi) == 0 {
            return Ok((velocity, phi));
        }
    }
    Err(Error::InvalidArgument(format!(
        "no fold-free warp in {MAX_WARP_DRAWS} draws; amplitude {} is too large for smoothing {}",
        spec.amplitude, spec.smoothing
    )))
}

/// Draws one pair; the whole sample is fixed by `spec.seed`.
pub fn generate_pair(spec: &SynthSpec) -> Result<SynthPair> {
    spec.validate()?;
    let shape = &spec.shape;
    let mut rng = seeded(spec.seed);
    let blobs = draw_blobs(spec, &mut rng);
    let (velocity, phi) = draw_warp(spec, &mut rng)?;
    let noise = standard_normal_vec(shape.len(), &mut rng);

    let n = shape.len();
    let nd = shape.ndim();
    let u = phi.displacement().data();
    let mut c = vec![0usize; nd];
    let mut q = vec![0.0; nd];
    let (mut fixed, mut fixed_labels) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut moving = Vec::with_capacity(n);
    for i in 0..n {
        shape.coords_into(i, &mut c);
        let p: Vec<f64> = c.iter().map(|&v| v as f64).collect();
        let (fv, fl) = scene_at(&blobs, &p);
        fixed.push(fv);
        fixed_labels.push(fl);
        for a in 0..nd {
            q[a] = p[a] + u[a * n + i];
        }
        let (mv, _) = scene_at(&blobs, &q);
        moving.push((mv + spec.noise_sigma * noise[i]).clamp(0.0, 1.0));
    }
    let fixed_labels = LabelMap::new(shape.clone(), fixed_labels)?;
    // nearest-neighbor labels, so the true map scores a Dice of exactly 1
    let moving_labels = warp_labels(&fixed_labels, &phi)?;
    Ok(SynthPair {
        moving: ScalarImage::new(shape.clone(), moving)?,
        fixed: ScalarImage::new(shape.clone(), fixed)?,
        moving_labels,
        fixed_labels,
        true_velocity: velocity,
        true_phi: phi,
    })
}

/// Record of how a dataset was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    /// Per-pair seed, in pair order.
    pub seeds: Vec<u64>,
    /// Per-pair directory names, in pair order (filled in when written to disk).
    #[serde(default)]
    pub pairs: Vec<String>,
}

impl Manifest {
    /// Splits the pair indices into consecutive train/validation/test ranges
    /// with the given fractions (the test part takes the remainder).
    pub fn split(&self, train: f64, validation: f64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let n = self.seeds.len();
        let n_train = ((n as f64) * train).round() as usize;
        let n_val = (((n as f64) * validation).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        (
            (0..n_train).collect(),
            (n_train..n_train + n_val).collect(),
            (n_train + n_val..n).collect(),
        )
    }
}

/// `n` independent pairs with seeds derived from `spec.seed`.
pub fn generate_dataset(spec: &SynthSpec, n: usize) -> Result<(Vec<SynthPair>, Manifest)> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "dataset size must be at least 1".into(),
        ));
    }
    spec.validate()?;
    let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(spec.seed, i)).collect();
    let pairs = seeds
        .iter()
        .map(|&seed| {
            generate_pair(&SynthSpec {
                seed,
                ..spec.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        pairs,
        Manifest {
            spec: spec.clone(),
            seeds,
            pairs: vec![],
        },
    ))
}
