//! On-disk layout of synthetic datasets and registration outputs.
//!
//! A dataset directory holds `manifest.json` and one directory per pair:
//!
//! ```text
//! pair_0000/moving.dfrg  fixed.dfrg  moving_labels.dfrg  fixed_labels.dfrg
//!           true_velocity.dfrg  true_phi.dfrg
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use diffreg::deform::{count_nonpositive_jacobian, warp};
use diffreg::grid::{LabelMap, ScalarImage};
use diffreg::infer::{loss_trace_csv, velocity_entropy, RegistrationResult};
use diffreg::io;
use diffreg::synth::{Manifest, SynthPair};

pub const MANIFEST: &str = "manifest.json";
pub const MOVING: &str = "moving.dfrg";
pub const FIXED: &str = "fixed.dfrg";
pub const MOVING_LABELS: &str = "moving_labels.dfrg";
pub const FIXED_LABELS: &str = "fixed_labels.dfrg";
pub const TRUE_VELOCITY: &str = "true_velocity.dfrg";
pub const TRUE_PHI: &str = "true_phi.dfrg";

/// Deformation written by `register` and `apply`.
pub const PHI: &str = "phi.dfrg";
/// Optional wall-clock record written with `--timing`.
pub const TIMING: &str = "timing.json";

pub fn pair_name(index: usize) -> String {
    format!("pair_{index:04}")
}

pub fn write_pair(dir: &Path, pair: &SynthPair) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    io::save_image(&dir.join(MOVING), &pair.moving)?;
    io::save_image(&dir.join(FIXED), &pair.fixed)?;
    io::save_labels(&dir.join(MOVING_LABELS), &pair.moving_labels)?;
    io::save_labels(&dir.join(FIXED_LABELS), &pair.fixed_labels)?;
    io::save_velocity(&dir.join(TRUE_VELOCITY), &pair.true_velocity)?;
    io::save_deformation(&dir.join(TRUE_PHI), &pair.true_phi)?;
    Ok(())
}

/// Writes pairs and a manifest that lists their directories.
pub fn write_dataset(
    dir: &Path,
    mut manifest: Manifest,
    pairs: &[SynthPair],
) -> anyhow::Result<Manifest> {
    manifest.pairs = (0..pairs.len()).map(pair_name).collect();
    for (name, pair) in manifest.pairs.iter().zip(pairs) {
        write_pair(&dir.join(name), pair)?;
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> anyhow::Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Pair directories of a dataset, in manifest order.
pub fn pair_dirs(dir: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let m = read_manifest(dir)?;
    if m.pairs.is_empty() {
        anyhow::bail!("{} lists no pairs", dir.join(MANIFEST).display());
    }
    Ok(m.pairs
        .into_iter()
        .map(|p| (p.clone(), dir.join(p)))
        .collect())
}

pub fn load_images(dir: &Path) -> anyhow::Result<(ScalarImage, ScalarImage)> {
    Ok((
        io::load_image(&dir.join(MOVING))?,
        io::load_image(&dir.join(FIXED))?,
    ))
}

pub fn load_labels(dir: &Path) -> anyhow::Result<(LabelMap, LabelMap)> {
    Ok((
        io::load_labels(&dir.join(MOVING_LABELS))?,
        io::load_labels(&dir.join(FIXED_LABELS))?,
    ))
}

/// Writes the deformation, posterior, uncertainty maps and, for 2D grids,
/// previews. Returns the number of non-positive Jacobian voxels.
pub fn write_registration(
    dir: &Path,
    moving: &ScalarImage,
    fixed: &ScalarImage,
    res: &RegistrationResult,
) -> anyhow::Result<usize> {
    let post = &res.posterior;
    let entropy = velocity_entropy(post);
    let warped = warp(fixed, &res.phi_map)?;
    io::save_deformation(&dir.join(PHI), &res.phi_map)?;
    io::save_velocity(&dir.join("mu.dfrg"), &post.mu)?;
    let var = diffreg::grid::VectorField::new(post.shape().clone(), post.variance())?;
    io::save_velocity(&dir.join("sigma2.dfrg"), &var)?;
    io::save_image(&dir.join("entropy.dfrg"), &entropy)?;
    io::save_image(&dir.join("warped_fixed.dfrg"), &warped)?;
    if !res.loss_trace.is_empty() {
        std::fs::write(dir.join("loss.csv"), loss_trace_csv(&res.loss_trace))?;
    }
    if post.shape().ndim() == 2 {
        for (name, img) in [
            ("moving", moving),
            ("fixed", fixed),
            ("warped_fixed", &warped),
            ("entropy", &entropy),
        ] {
            std::fs::write(dir.join(format!("{name}.pgm")), io::pgm_bytes(img)?)?;
        }
        std::fs::write(
            dir.join("phi.ppm"),
            io::deformation_ppm_bytes(&res.phi_map, 4)?,
        )?;
    }
    Ok(count_nonpositive_jacobian(&res.phi_map))
}
