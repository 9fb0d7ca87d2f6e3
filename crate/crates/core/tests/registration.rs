//! End-to-end behavior of per-pair optimization and network training on
//! small problems with known answers.

use diffreg::grid::{GridShape, ScalarImage};
use diffreg::infer::{register_pair, OptimizerConfig};
use diffreg::net::{ImagePair, Network, NetworkSpec, TrainConfig, Trainer};
use diffreg::synth::{generate_pair, SynthSpec};

/// Smooth texture with structure everywhere, evaluated at real coordinates.
fn texture(p: [f64; 2]) -> f64 {
    let bumps = [
        ([8.0, 9.0], 3.0),
        ([20.0, 12.0], 4.0),
        ([13.0, 22.0], 3.5),
        ([24.0, 25.0], 3.0),
    ];
    let mut v = 0.1;
    for (c, w) in bumps {
        let r2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        v += 0.8 * (-r2 / (2.0 * w * w)).exp();
    }
    v.min(1.0)
}

fn image(s: &GridShape, shift: [f64; 2]) -> ScalarImage {
    ScalarImage::from_fn(s.clone(), |c| {
        texture([c[0] as f64 + shift[0], c[1] as f64 + shift[1]])
    })
    .unwrap()
}

#[test]
fn self_registration_stays_near_identity() {
    let s = GridShape::new(&[32, 32]).unwrap();
    let y = image(&s, [0.0, 0.0]);
    let res = register_pair(&y, &y, &OptimizerConfig::default()).unwrap();
    let max_mu = res
        .posterior
        .mu
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_mu <= 0.25, "max |mu| {max_mu}");
}

#[test]
fn self_registration_recon_does_not_increase() {
    let s = GridShape::new(&[32, 32]).unwrap();
    let y = image(&s, [0.0, 0.0]);
    let res = register_pair(&y, &y, &OptimizerConfig::default()).unwrap();
    let (first, last) = (
        res.loss_trace.first().unwrap(),
        res.loss_trace.last().unwrap(),
    );
    assert!(
        last.recon <= first.recon,
        "recon {} -> {}",
        first.recon,
        last.recon
    );
}

#[test]
fn recovers_a_known_translation() {
    let s = GridShape::new(&[32, 32]).unwrap();
    // x(p) = y(p + t), so the sought map is p ↦ p + t
    let t = [3.0, 0.0];
    let (x, y) = (image(&s, t), image(&s, [0.0, 0.0]));
    let res = register_pair(&x, &y, &OptimizerConfig::default()).unwrap();
    let u = res.phi_map.displacement();
    let mut worst: f64 = 0.0;
    for i in 0..s.len() {
        if s.is_interior(i, 8) {
            let d = u.at(i);
            worst = worst.max(((d[0] - t[0]).powi(2) + (d[1] - t[1]).powi(2)).sqrt());
        }
    }
    assert!(worst <= 0.5, "max interior error {worst}");
}

#[test]
fn loss_trace_has_one_entry_per_iteration() {
    let s = GridShape::new(&[8, 8]).unwrap();
    let cfg = OptimizerConfig {
        iterations: 17,
        ..OptimizerConfig::default()
    };
    let res = register_pair(&image(&s, [1.0, 0.5]), &image(&s, [0.0, 0.0]), &cfg).unwrap();
    assert_eq!(res.loss_trace.len(), 17);
    assert!(res.loss_trace.iter().all(|l| l.is_finite()));
}

#[test]
fn training_reduces_the_loss() {
    let shape = GridShape::new(&[16, 16]).unwrap();
    let data: Vec<ImagePair> = (0..8)
        .map(|seed| {
            let spec = SynthSpec {
                n_blobs: 3,
                amplitude: 1.5,
                smoothing: 2.0,
                ..SynthSpec::new(shape.clone(), seed)
            };
            let p = generate_pair(&spec).unwrap();
            ImagePair {
                moving: p.moving,
                fixed: p.fixed,
            }
        })
        .collect();
    let spec = NetworkSpec {
        levels: 1,
        first_filters: 4,
        down_filters: 8,
        up_filters: 8,
        ..NetworkSpec::default()
    };
    let config = TrainConfig {
        epochs: 20,
        learning_rate: 3e-3,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(Network::new(spec, 1).unwrap(), config).unwrap();
    let logs = trainer.train(&data, |_, _| Ok(())).unwrap();
    assert_eq!(logs.len(), 20);
    assert!(
        logs[19].loss.total < logs[0].loss.total,
        "{} vs {}",
        logs[19].loss.total,
        logs[0].loss.total
    );
}
