//! End-to-end checks of the command-line surface: exit codes, file outputs,
//! and config handling.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_depthforge"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let out = bin().arg("gradcheck").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for layer in ["dense", "conv2d", "conv_t2d", "batchnorm2d", "leaky_relu", "relu", "tanh", "sigmoid"] {
        assert!(stdout.contains(layer), "missing {layer} in report:\n{stdout}");
    }
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn malformed_config_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    write(&cfg, "{ nope");
    let out = bin()
        .args(["fixture", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path().join("fx"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.json"), "stderr: {stderr}");
}

#[test]
fn invalid_config_value_names_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad_lr.json");
    write(&cfg, r#"{"gan": {"lr_g": -1.0}}"#);
    let out = bin()
        .args(["fixture", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path().join("fx"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gan.lr_g"));
}

#[test]
fn fixture_features_classify_evaluate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(
        &cfg,
        r#"{
            "seed": 5,
            "dataio": { "n_per_class": 10, "image_size": 32 },
            "gan": { "image_size": 32 },
            "classify": { "rf_trees": 8, "gbt_rounds": 4 },
            "metrics": { "embedding_k": 6, "is_splits": 3, "prob_model_rounds": 4 }
        }"#,
    );
    let fx = dir.path().join("fixture");
    let out = bin()
        .args(["fixture", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&fx)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fx.join("manifest.csv").exists());
    assert!(fx.join("neutral/0000.png").exists());

    let features = dir.path().join("features.csv");
    let out = bin()
        .args(["features", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(fx.join("manifest.csv"))
        .arg("--out")
        .arg(&features)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let cls = dir.path().join("cls");
    let out = bin()
        .args(["classify", "--config"])
        .arg(&cfg)
        .arg("--train-features")
        .arg(&features)
        .arg("--out")
        .arg(&cls)
        .args(["--repeats", "3", "--test-on", "synthetic"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = std::fs::read_to_string(cls.join("runs.csv")).unwrap();
    // header + 3 runs × 3 classifiers
    assert_eq!(runs.lines().count(), 1 + 9);
    assert!(cls.join("report.json").exists());

    // evaluate the fixture against itself: near-perfect metrics
    let metrics = dir.path().join("metrics.json");
    let out = bin()
        .args(["evaluate", "--config"])
        .arg(&cfg)
        .arg("--real")
        .arg(fx.join("manifest.csv"))
        .arg("--synth")
        .arg(&fx) // not a synth dir: should fail (no <class>_<idx>.png at top level)
        .arg("--out")
        .arg(&metrics)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "expected failure for a non-synth dir");
}

#[test]
fn classify_repeats_reproduce_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(
        &cfg,
        r#"{
            "seed": 9,
            "dataio": { "n_per_class": 8, "image_size": 32 },
            "gan": { "image_size": 32 },
            "classify": { "rf_trees": 5, "gbt_rounds": 3 }
        }"#,
    );
    let fx = dir.path().join("fixture");
    assert!(bin()
        .args(["fixture", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&fx)
        .status()
        .unwrap()
        .success());
    let features = dir.path().join("features.csv");
    assert!(bin()
        .args(["features", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(fx.join("manifest.csv"))
        .arg("--out")
        .arg(&features)
        .status()
        .unwrap()
        .success());
    let mut runs = Vec::new();
    for name in ["c1", "c2"] {
        let cls = dir.path().join(name);
        assert!(bin()
            .args(["classify", "--config"])
            .arg(&cfg)
            .arg("--train-features")
            .arg(&features)
            .arg("--out")
            .arg(&cls)
            .args(["--repeats", "4", "--test-on", "synthetic"])
            .status()
            .unwrap()
            .success());
        runs.push(std::fs::read(cls.join("runs.csv")).unwrap());
    }
    assert_eq!(runs[0], runs[1], "runs.csv must be byte-identical for the same seed");
}
