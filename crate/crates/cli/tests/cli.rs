use std::path::Path;
use std::process::{Command, Output};

use fibro_core::model::write_checkpoint_file;
use fibro_core::synthetic::generate_dataset;
use fibro_core::{EvalReport, Model, ModelConfig, SynthConfig};

fn fibro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fibro")).args(args).env("RUST_LOG", "info").output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = fibro(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn malformed_learning_rate_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = fibro(&["train", "--bundles", s(dir.path()), "--task", "cirrhosis", "--folds", "4", "--seed", "1", "--out", s(&dir.path().join("o")), "--lr", "abc"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lr") && err.contains("abc"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train.momentum": 0.9}"#).unwrap();
    let out = fibro(&["--config", s(&cfg), "synth", "--n", "8", "--seed", "1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.momentum"));
}

#[test]
fn wrong_ensemble_size_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&SynthConfig { n_cases: 8, seed: 3, ..SynthConfig::default() }, &dir.path().join("d")).unwrap();
    let mut ckpts = Vec::new();
    for f in 0..3 {
        let p = dir.path().join(format!("fold_{f}.ckpt"));
        write_checkpoint_file(&p, &Model::new(ModelConfig::desk(2), f).unwrap()).unwrap();
        ckpts.push(p);
    }
    let mut args = vec!["evaluate", "--checkpoints"];
    args.extend(ckpts.iter().map(|p| s(p)));
    let report = dir.path().join("report.json");
    args.extend(["--bundles", s(&data.bundle_dir), "--task", "cirrhosis", "--out", s(&report)]);
    let out = fibro(&args);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!report.exists());
}

#[test]
fn synth_preprocess_train_evaluate_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let p = |x: &str| dir.path().join(x);
    let ok = |args: &[&str]| {
        let out = fibro(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["synth", "--n", "16", "--seed", "9", "--out", s(&p("raw"))]);
    ok(&["preprocess", "--manifest", s(&p("raw/manifest.csv")), "--output-dir", s(&p("bundles")), "--model-scale", "desk"]);
    let out = ok(&[
        "train", "--bundles", s(&p("bundles")), "--task", "cirrhosis", "--folds", "4", "--seed", "2", "--out", s(&p("run")),
        "--model-scale", "desk", "--epochs", "2", "--patience", "2",
    ]);
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("event=start") && log.contains("config_hash="), "{log}");
    let ckpts: Vec<_> = (0..4).map(|f| p(&format!("run/fold_{f}.ckpt"))).collect();
    let mut args = vec!["evaluate", "--checkpoints"];
    args.extend(ckpts.iter().map(|c| s(c)));
    let report = p("report.json");
    let bundles = p("bundles");
    args.extend(["--bundles", s(&bundles), "--task", "cirrhosis", "--out", s(&report)]);
    ok(&args);
    let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.n, 16);
    assert!((0.0..=1.0).contains(&r.accuracy));
    ok(&["predict", "--checkpoint", s(&ckpts[0]), "--bundles", s(&p("bundles")), "--out", s(&p("probs.csv"))]);
    let csv = std::fs::read_to_string(p("probs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
}
