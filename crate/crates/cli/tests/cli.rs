use std::path::Path;
use std::process::{Command, Output};

use qtz_core::format::{self, Artifact};
use qtz_core::qat::{ModelSpec, QatModel, TrainConfig};
use serde_json::Value;

fn qtz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qtz")).args(args).output().expect("spawn qtz")
}

fn ok_json(args: &[&str]) -> Value {
    let out = qtz(args);
    assert!(out.status.success(), "qtz {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON object")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_data(dir: &Path) {
    ok_json(&["gen-data", "--out", p(dir), "--train", "600", "--test", "200", "--seed", "3"]);
}

#[test]
fn zero_step_training_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data);
    let ck = dir.path().join("init.qtz");
    let v = ok_json(&["train", "--data", p(&data), "--out", p(&ck), "--steps", "0", "--seed", "5"]);
    assert_eq!(v["steps"], 0);
    let Artifact::Checkpoint(saved) = format::load(&ck).unwrap() else { panic!("not a checkpoint") };
    let fresh = QatModel::new(ModelSpec::reference(), &TrainConfig { rng_seed: 5, ..TrainConfig::default() });
    assert_eq!(format::encode(&Artifact::Checkpoint(saved)).unwrap(), format::encode(&Artifact::Checkpoint(fresh)).unwrap());
    let metrics = std::fs::read_to_string(dir.path().join("init.qtz.metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn post_training_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data);
    let ck = dir.path().join("float.qtz");
    ok_json(&["train", "--data", p(&data), "--out", p(&ck), "--steps", "60", "--seed", "1"]);

    let wo = dir.path().join("w8.qtz");
    let v = ok_json(&["quantize-weights", "--model", p(&ck), "--out", p(&wo)]);
    assert_eq!(v["size_ratio"].as_f64().unwrap(), 0.25);

    let ranges = dir.path().join("ranges.json");
    let v = ok_json(&["calibrate", "--model", p(&ck), "--data", p(&data), "--batches", "5", "--out", p(&ranges)]);
    for t in ["image", "relu1", "relu2", "pool", "logits"] {
        assert!(v["tensors"].get(t).is_some(), "no range for {t}");
    }

    let int = dir.path().join("int8.qtz");
    ok_json(&["convert", "--model", p(&ck), "--ranges", p(&ranges), "--out", p(&int)]);
    let report = dir.path().join("ops.csv");
    let v = ok_json(&["run", "--model", p(&int), "--data", p(&data), "--report", p(&report), "--limit", "100"]);
    assert_eq!(v["kind"], "integer");
    assert_eq!(v["samples"], 100);
    assert!(std::fs::read_to_string(&report).unwrap().starts_with("op,kind,total_us"));

    let v = ok_json(&["analyze", "--model", p(&ck), "--out", p(&dir.path().join("sqnr.csv"))]);
    assert!(v["sqnr"].as_array().unwrap().len() >= 9);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data);
    let ck = dir.path().join("m.qtz");
    ok_json(&["train", "--data", p(&data), "--out", p(&ck), "--steps", "0"]);

    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "learning_rat = 0.1\n").unwrap();
    let out = qtz(&["train", "--config", p(&bad_cfg), "--data", p(&data), "--out", p(&ck)]);
    assert_eq!(out.status.code(), Some(2));

    let out = qtz(&["train", "--data", p(&dir.path().join("missing")), "--out", p(&ck)]);
    assert_eq!(out.status.code(), Some(3));

    let ranges = dir.path().join("ranges.json");
    std::fs::write(&ranges, r#"{"image": {"x_min": 0.0, "x_max": 1.0}}"#).unwrap();
    let out = qtz(&["convert", "--model", p(&ck), "--ranges", p(&ranges), "--out", p(&dir.path().join("i.qtz"))]);
    assert_eq!(out.status.code(), Some(4));

    let wo = dir.path().join("w.qtz");
    ok_json(&["quantize-weights", "--model", p(&ck), "--out", p(&wo)]);
    let out = qtz(&["quantize-weights", "--model", p(&wo), "--out", p(&dir.path().join("w2.qtz"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}
