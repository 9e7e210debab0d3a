use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn distillseg(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distillseg"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DISTILLSEG_CACHE")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const FAST: [&str; 5] = ["--toy-encoder", "--epochs", "3", "--channel-schedule", "8,4,2"];

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = distillseg(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    assert_eq!(distillseg(dir.path(), &["train"]).status.code(), Some(2));
    assert_eq!(distillseg(dir.path(), &["simulate", "--mode", "manual_ui"]).status.code(), Some(2));
    assert_eq!(distillseg(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn oversized_budget_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(&distillseg(dir.path(), &["synth", "--n", "12", "--size", "64", "--out", "d"]));
    let out = distillseg(dir.path(), &["train", "--budget", "500", "--data", "d", "--toy-encoder"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("500"), "{stderr}");
    // nothing was annotated on the way to the error
    assert!(!dir.path().join("d/annotations/annotations.jsonl").exists());
}

#[test]
fn missing_adapter_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(&distillseg(dir.path(), &["synth", "--n", "12", "--size", "64", "--out", "d"]));
    let out = distillseg(dir.path(), &["curve", "--budgets", "2", "--data", "d"]);
    assert_eq!(out.status.code(), Some(1));
    let out = distillseg(dir.path(), &["embed", "--data", "d", "--toy-encoder"]);
    assert_eq!(out.status.code(), Some(1), "embed without a cache directory");
}

#[test]
fn synth_curve_plot_train_eval_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let out = distillseg(cwd, &["synth", "--n", "12", "--size", "64", "--seed", "1", "--out", "d"]);
    ok(&out);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["samples"], 12);
    assert!(cwd.join("d/manifest.json").is_file());
    let sidecar = read_json(&cwd.join("d/manifest.json.run.json"));
    assert_eq!(sidecar["run_config"]["seed"], 1);

    let mut args = vec!["curve", "--budgets", "2,4", "--data", "d", "--seed", "1"];
    args.extend(FAST);
    ok(&distillseg(cwd, &args));
    let report = read_json(&cwd.join("d/curve.json"));
    let entries = report["result"]["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0]["budget"], 2);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(report["run_config"]["train"]["budgets"], serde_json::json!([2, 4]));
    assert_eq!(report["run_config"]["train"]["epochs"], 3);
    assert_eq!(report["run_config"]["decoder"]["channel_schedule"], serde_json::json!([8, 4, 2]));
    assert_eq!(report["run_config"]["adapter"]["kind"], "toy");
    let log = std::fs::read_to_string(cwd.join("d/annotations/annotations.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4, "nested budgets annotate the largest prefix only");

    ok(&distillseg(cwd, &["plot", "--data", "d"]));
    let svg = std::fs::read_to_string(cwd.join("d/curve.svg")).unwrap();
    assert!(svg.contains("<metadata>") && svg.contains(report["config_hash"].as_str().unwrap()));
    let csv = std::fs::read_to_string(cwd.join("d/curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(cwd.join("d/curve.csv.run.json").is_file());

    // train reuses the logged annotations
    let mut args = vec!["train", "--budget", "2", "--data", "d", "--seed", "1"];
    args.extend(FAST);
    ok(&distillseg(cwd, &args));
    assert_eq!(std::fs::read_to_string(cwd.join("d/annotations/annotations.jsonl")).unwrap().lines().count(), 4);
    let train = read_json(&cwd.join("d/decoder-2.ckpt.run.json"));
    assert_eq!(train["result"]["history"]["epoch_losses"].as_array().unwrap().len(), 3);
    // same seed, same selection, same weights as the curve's budget-2 decoder
    assert_eq!(train["result"]["history"]["param_digest"], entries[0]["param_digest"]);

    ok(&distillseg(cwd, &["eval", "--checkpoint", "d/decoder-2.ckpt", "--data", "d", "--toy-encoder", "--seed", "1"]));
    let eval = read_json(&cwd.join("d/eval-test.json"));
    assert_eq!(eval["result"]["micro_f1"], entries[0]["metrics"]["micro_f1"]);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    ok(&distillseg(cwd, &["synth", "--n", "12", "--size", "64", "--out", "d"]));
    std::fs::write(
        cwd.join("run.json"),
        r#"{"seed": 4, "train": {"epochs": 7, "channel_schedule": [8, 4, 2]}, "annotation_mode": "point"}"#,
    )
    .unwrap();
    let args = ["curve", "--config", "run.json", "--budgets", "2", "--epochs", "2", "--data", "d", "--toy-encoder"];
    ok(&distillseg(cwd, &args));
    let report = read_json(&cwd.join("d/curve.json"));
    let rc = &report["run_config"];
    assert_eq!(rc["train"]["epochs"], 2);
    assert_eq!(rc["seed"], 4);
    assert_eq!(rc["train"]["seed"], 4);
    assert_eq!(rc["adapter"]["seed"], 4);
    assert_eq!(rc["annotation_mode"], "point");
}

#[test]
fn embed_warms_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    ok(&distillseg(cwd, &["synth", "--n", "3", "--size", "64", "--out", "d"]));
    let out = distillseg(cwd, &["embed", "--data", "d", "--toy-encoder", "--cache", "cache"]);
    ok(&out);
    let n = std::fs::read_dir(cwd.join("cache"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "emb"))
        .count();
    assert_eq!(n, 3);
}
