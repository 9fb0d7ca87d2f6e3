//! Seeding helpers and smooth random fields.
//!
//! Every random draw in the crate goes through a [`ChaCha8Rng`] built from an
//! explicit `u64` seed, so results are reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grid::{GridShape, VectorField};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed (splitmix64 finalizer over base and stream).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal_vec(len: usize, rng: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Standard-normal field with one independent draw per voxel and component.
pub fn normal_field(shape: &GridShape, rng: &mut Rng) -> VectorField {
    let data = standard_normal_vec(shape.ndim() * shape.len(), rng);
    VectorField::new(shape.clone(), data).expect("normal draws are finite")
}

/// Separable Gaussian blur of every channel of a channel-first buffer.
/// Kernel truncated at 4σ, clamp-to-edge boundary.
pub fn gaussian_blur(data: &[f64], shape: &GridShape, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

    let n = shape.len();
    let strides = shape.strides();
    let mut out = data.to_vec();
    let mut scratch = vec![0.0; n];
    for ch in out.chunks_exact_mut(n) {
        for (a, &s) in strides.iter().enumerate() {
            let e = shape.dims()[a] as isize;
            for (i, dst) in scratch.iter_mut().enumerate() {
                let c = ((i / s) as isize) % e;
                let base = i as isize - c * s as isize;
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let t = (c + k as isize - radius).clamp(0, e - 1);
                    acc += w * ch[(base + t * s as isize) as usize];
                }
                *dst = acc;
            }
            ch.copy_from_slice(&scratch);
        }
    }
    out
}

/// White noise, Gaussian blur at `sigma` voxels, then rescaled so the largest
/// absolute component equals `amplitude` exactly.
pub fn smooth_random_field(
    shape: &GridShape,
    amplitude: f64,
    sigma: f64,
    rng: &mut Rng,
) -> VectorField {
    let noise = normal_field(shape, rng);
    let blurred = gaussian_blur(noise.data(), shape, sigma);
    let peak = blurred.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    VectorField::new(shape.clone(), blurred.iter().map(|v| v * scale).collect())
        .expect("blurred noise is finite")
}
