use std::path::Path;
use std::process::{Command, Output};

use latctl::episode::{EpisodeSummary, TerminalEvent};
use latctl::experiment::ExperimentConfig;
use latctl::manifest::Manifest;
use latctl::supervisor::Calibration;

fn latctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latctl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run latctl")
}

fn ok(args: &[&str]) {
    let o = latctl(args);
    assert!(
        o.status.success(),
        "latctl {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn verified(out: &Path, command: &str) -> Manifest {
    let m = Manifest::load(out.join(Manifest::file_name(command))).unwrap();
    assert_eq!(m.command, command);
    assert!(m.verify(out).is_empty());
    m
}

#[test]
fn show_config_round_trips() {
    let o = latctl(&["show-config"]);
    assert!(o.status.success());
    let cfg = ExperimentConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn reference_config_is_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    assert_eq!(ExperimentConfig::load(path).unwrap(), ExperimentConfig::default());
}

#[test]
fn missing_artifacts_name_their_producer() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    for (args, producer) in [
        (vec!["train-rf", "--out", out], "gen-data"),
        (vec!["train-mlp", "--out", out], "gen-data"),
        (vec!["calibrate", "--out", out], "train-rf"),
    ] {
        let o = latctl(&args);
        assert!(!o.status.success());
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(&format!("latctl {producer}")), "{args:?}: {err}");
    }
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "budgets = []\n").unwrap();
    let o = latctl(&["evaluate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!o.status.success());
}

#[test]
fn pipeline_produces_verified_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("small.toml");
    std::fs::write(&cfg, "[forest]\nn_trees = 12\n").unwrap();
    let common = ["--config", s(&cfg), "--out", s(out)];

    ok(&[&["gen-data", "--laps", "1"][..], &common[..]].concat());
    let gen = verified(out, "gen-data");
    assert_eq!(gen.seed, Some(7));

    ok(&[&["train-rf"][..], &common[..]].concat());
    let train = verified(out, "train-rf");
    assert_eq!(train.inputs[0].sha256, gen.outputs[0].sha256);

    ok(&[&["calibrate"][..], &common[..]].concat());
    verified(out, "calibrate");
    let cal: Calibration = serde_json::from_str(&std::fs::read_to_string(out.join("calibration.json")).unwrap()).unwrap();
    assert!(cal.cov_off < cal.cov_on);

    ok(&[&["drive"][..], &common[..]].concat());
    ok(&[&["drive", "--model", s(&out.join("forest.json")), "--supervised"][..], &common[..]].concat());
    verified(out, "drive");
    for stem in ["drive_train-a_expert", "drive_train-a_supervised_forest"] {
        let text = std::fs::read_to_string(out.join(format!("{stem}.summary.json"))).unwrap();
        let sm: EpisodeSummary = serde_json::from_str(&text).unwrap();
        assert_eq!(sm.terminal, TerminalEvent::LapComplete, "{stem}");
    }
}

#[test]
fn corrupt_model_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("forest.json");
    std::fs::write(&model, r#"{"kind":"random_forest_regressor","schema_version":99}"#).unwrap();
    let o = latctl(&["drive", "--model", s(&model), "--out", s(dir.path())]);
    assert!(!o.status.success());
}
