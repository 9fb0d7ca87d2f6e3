//! Behavior of the `diffreg` binary: outputs, exit codes and reruns.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diffreg::deform::count_nonpositive_jacobian;
use diffreg::io;
use diffreg::net::{amortized_register, Trainer};
use sha2::{Digest, Sha256};

fn diffreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffreg"))
        .args(args)
        .env_remove("DIFFREG_OUT")
        .env_remove("DIFFREG_DATA")
        .env_remove("DIFFREG_CONFIG")
        .env_remove("DIFFREG_CHECKPOINT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = diffreg(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path to SHA-256 of every file below `dir`.
fn hashes(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(std::fs::read(&p).unwrap());
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    hex::encode(digest),
                );
            }
        }
    }
    out
}

const SMALL_NET: &str =
    "[network]\nlevels = 1\nfirst_filters = 4\ndown_filters = 8\nup_filters = 8\n";

#[test]
fn synth_writes_pairs_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&[
        "synth",
        "--shape",
        "64x64",
        "--n",
        "10",
        "--seed",
        "7",
        "--out",
        s(&d),
    ]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 10);
    for i in 0..10 {
        assert!(d.join(format!("pair_{i:04}/moving.dfrg")).exists());
    }
    assert!(d.join("run.json").exists());

    let again = t.path().join("again");
    ok(&[
        "synth",
        "--shape",
        "64x64",
        "--n",
        "10",
        "--seed",
        "7",
        "--out",
        s(&again),
    ]);
    let (h1, h2) = (hashes(&d), hashes(&again));
    assert_eq!(h1.len(), 10 * 6 + 2);
    assert_eq!(h1, h2);
}

#[test]
fn synth_rejects_invalid_shape_without_output() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    let out = diffreg(&["synth", "--shape", "0x64", "--out", s(&d)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert_eq!(std::fs::read_dir(t.path()).unwrap().count(), 0);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(diffreg(&["register"]).status.code(), Some(1));
    assert_eq!(diffreg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(diffreg(&["--help"]).status.code(), Some(0));
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["synth", "--shape", "16x16", "--out", s(&d)]);
    // existing output is never overwritten
    assert_eq!(
        diffreg(&["synth", "--shape", "16x16", "--out", s(&d)])
            .status
            .code(),
        Some(1)
    );
    let cfg = t.path().join("c.toml");
    std::fs::write(&cfg, "[model]\nlamda = 3.0\n").unwrap();
    let p = d.join("pair_0000");
    let out = diffreg(&[
        "register",
        "--moving",
        s(&p.join("moving.dfrg")),
        "--fixed",
        s(&p.join("fixed.dfrg")),
        "--config",
        s(&cfg),
        "--out",
        s(&t.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
}

#[test]
fn register_self_pair_and_rerun() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["synth", "--shape", "32x32", "--seed", "3", "--out", s(&d)]);
    let img = d.join("pair_0000/fixed.dfrg");
    let before = hashes(&d);
    let run = |name: &str| {
        let out = t.path().join(name);
        ok(&[
            "register",
            "--moving",
            s(&img),
            "--fixed",
            s(&img),
            "--seed",
            "5",
            "--iterations",
            "100",
            "--out",
            s(&out),
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in [
        "phi.dfrg",
        "mu.dfrg",
        "sigma2.dfrg",
        "entropy.dfrg",
        "loss.csv",
        "run.json",
        "phi.ppm",
        "entropy.pgm",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(
        count_nonpositive_jacobian(&io::load_deformation(&a.join("phi.dfrg")).unwrap()),
        0
    );
    assert_eq!(
        std::fs::read_to_string(a.join("loss.csv"))
            .unwrap()
            .lines()
            .count(),
        101
    );
    assert_eq!(hashes(&a), hashes(&b));
    assert_eq!(hashes(&d), before, "inputs were modified");
}

#[test]
fn register_names_missing_input() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nope.dfrg");
    let out = diffreg(&[
        "register",
        "--moving",
        s(&missing),
        "--fixed",
        s(&missing),
        "--out",
        s(&t.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
    assert!(!t.path().join("r").exists());
}

#[test]
fn train_resume_apply() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&[
        "synth",
        "--shape",
        "16x16",
        "--n",
        "6",
        "--seed",
        "11",
        "--blobs",
        "3",
        "--out",
        s(&d),
    ]);
    let cfg = t.path().join("c.toml");
    std::fs::write(&cfg, SMALL_NET).unwrap();
    let (straight, resumed) = (t.path().join("straight"), t.path().join("resumed"));
    ok(&[
        "train",
        "--data",
        s(&d),
        "--config",
        s(&cfg),
        "--epochs",
        "4",
        "--out",
        s(&straight),
    ]);
    ok(&[
        "train",
        "--data",
        s(&d),
        "--config",
        s(&cfg),
        "--epochs",
        "2",
        "--out",
        s(&resumed),
    ]);
    // a second fresh run into the same directory is refused
    assert_eq!(
        diffreg(&[
            "train",
            "--data",
            s(&d),
            "--config",
            s(&cfg),
            "--epochs",
            "4",
            "--out",
            s(&resumed)
        ])
        .status
        .code(),
        Some(1)
    );
    ok(&[
        "train",
        "--data",
        s(&d),
        "--config",
        s(&cfg),
        "--epochs",
        "4",
        "--resume",
        "--out",
        s(&resumed),
    ]);
    let ckpt = straight.join("checkpoint.ckpt");
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(resumed.join("checkpoint.ckpt")).unwrap()
    );
    assert_eq!(
        std::fs::read(straight.join("epochs.csv")).unwrap(),
        std::fs::read(resumed.join("epochs.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read_to_string(straight.join("epochs.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );

    let p = d.join("pair_0002");
    let ap = t.path().join("ap");
    ok(&[
        "apply",
        "--checkpoint",
        s(&ckpt),
        "--moving",
        s(&p.join("moving.dfrg")),
        "--fixed",
        s(&p.join("fixed.dfrg")),
        "--out",
        s(&ap),
    ]);
    let trainer = Trainer::load(&ckpt).unwrap();
    let lib = amortized_register(
        &trainer.net,
        &io::load_image(&p.join("moving.dfrg")).unwrap(),
        &io::load_image(&p.join("fixed.dfrg")).unwrap(),
        trainer.config.steps,
    )
    .unwrap();
    let via_cli = io::load_deformation(&ap.join("phi.dfrg")).unwrap();
    let via_lib = io::TensorFile::from_bytes(&{
        let f = t.path().join("lib.dfrg");
        io::save_deformation(&f, &lib.phi_map).unwrap();
        std::fs::read(f).unwrap()
    })
    .unwrap();
    assert_eq!(io::TensorFile::load(&ap.join("phi.dfrg")).unwrap(), via_lib);
    assert_eq!(via_cli.shape().dims(), &[16, 16]);

    let bad = t.path().join("bad.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    std::fs::write(&bad, bytes).unwrap();
    let out = diffreg(&[
        "apply",
        "--checkpoint",
        s(&bad),
        "--data",
        s(&d),
        "--out",
        s(&t.path().join("ap2")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
}

#[test]
fn eval_identity_and_aggregates() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&[
        "synth",
        "--shape",
        "32x32",
        "--n",
        "3",
        "--seed",
        "2",
        "--amplitude",
        "0",
        "--out",
        s(&d),
    ]);
    let results = t.path().join("results");
    ok(&[
        "register",
        "--data",
        s(&d),
        "--iterations",
        "20",
        "--out",
        s(&results.join("optimized")),
    ]);
    let e = t.path().join("e");
    ok(&[
        "eval",
        "--results",
        s(&results),
        "--data",
        s(&d),
        "--identity",
        "--out",
        s(&e),
    ]);
    let pairs = std::fs::read_to_string(e.join("pairs.csv")).unwrap();
    let rows: Vec<Vec<&str>> = pairs
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 6);
    // zero amplitude: moving and fixed label maps coincide
    for r in rows.iter().filter(|r| r[1] == "identity") {
        assert_eq!(r[2].parse::<f64>().unwrap(), 1.0);
    }
    let summary = std::fs::read_to_string(e.join("summary.csv")).unwrap();
    for line in summary.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let dice: Vec<f64> = rows
            .iter()
            .filter(|r| r[1] == f[0])
            .map(|r| r[2].parse().unwrap())
            .collect();
        let mean = dice.iter().sum::<f64>() / dice.len() as f64;
        assert_eq!(f[1].parse::<usize>().unwrap(), 3);
        assert!((f[2].parse::<f64>().unwrap() - mean).abs() < 1e-12);
    }
    assert!(e.join("labels_identity.csv").exists() && e.join("labels_optimized.csv").exists());

    let e2 = t.path().join("e2");
    ok(&[
        "eval",
        "--results",
        s(&results),
        "--data",
        s(&d),
        "--identity",
        "--out",
        s(&e2),
    ]);
    assert_eq!(hashes(&e), hashes(&e2));

    let empty = t.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(
        diffreg(&[
            "eval",
            "--results",
            s(&empty),
            "--data",
            s(&d),
            "--out",
            s(&t.path().join("e3"))
        ])
        .status
        .code(),
        Some(2)
    );
}
