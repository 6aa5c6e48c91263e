//! The command-line tool, driven as a subprocess.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxr-triage")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err(args: &[&str]) -> Value {
    let out = cli(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let e: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(e["error"]["message"].is_string());
    e["error"].clone()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stagewise_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    let v = ok(&["synth", "--n-pos", "6", "--n-neg", "4", "--seed", "1", "--side", "48", "--out", s(&corpus)]);
    assert_eq!((v["rows"].as_u64(), v["covid"].as_u64(), v["normal"].as_u64()), (Some(10), Some(6), Some(4)));
    let manifest = corpus.join("manifest.csv");
    let m = s(&manifest);

    let plan_path = d.join("plan.json");
    let plan = ok(&["plan-folds", "--manifest", m, "--folds", "2", "--split-seed", "9", "--stratified", "true", "--out", s(&plan_path)]);
    assert_eq!(plan["folds"].as_array().unwrap().len(), 2);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    assert_eq!(written, plan);

    let all = d.join("all.feat");
    let v = ok(&["extract", "--manifest", m, "--backbone", "toypool", "--out", s(&all)]);
    assert_eq!((v["rows"].as_u64(), v["dim"].as_u64()), (Some(10), Some(768)));

    let fold_args = ["--manifest", m, "--folds", "2", "--split-seed", "9", "--stratified", "true"];
    let train_feats = d.join("train.feat");
    let mut a = vec!["extract", "--backbone", "toypool", "--fold", "0", "--part", "train", "--out", s(&train_feats)];
    a.extend(fold_args);
    a.extend(["--augment", "true", "--augment-seed", "2", "--augment-copies", "2"]);
    a.extend(["--flip-x-prob", "0.5", "--flip-y-prob", "0", "--rotation-range-deg", "10", "--shear-range", "0.3"]);
    assert_eq!(ok(&a)["rows"].as_u64(), Some(10));
    let test_feats = d.join("test.feat");
    let mut a = vec!["extract", "--backbone", "toypool", "--fold", "0", "--out", s(&test_feats)];
    a.extend(fold_args);
    assert_eq!(ok(&a)["rows"].as_u64(), Some(5));

    let train_args = ["--manifest", m, "--epochs", "5", "--batch-size", "2", "--learning-rate", "0.05", "--shuffle", "true", "--train-seed", "3"];
    let mut heads = Vec::new();
    for init in ["1", "2", "3"] {
        let head = d.join(format!("head{init}.json"));
        let mut a = vec!["train", "--features", s(&train_feats), "--out", s(&head), "--init-seed", init, "--backbone", "toypool"];
        a.extend(train_args);
        assert_eq!(ok(&a)["loss_trace"].as_array().unwrap().len(), 5);
        heads.push(head);
    }

    let eval_dir = d.join("eval");
    let report = ok(&["evaluate", "--manifest", m, "--head", s(&heads[0]), "--features", s(&test_feats), "--out-dir", s(&eval_dir)]);
    let c = &report["counts"];
    let total: f64 = ["tp", "fp", "tn", "fn"].iter().map(|k| c[k].as_f64().unwrap()).sum();
    assert_eq!(total, 5.0);
    assert!(eval_dir.join("roc.csv").exists() && eval_dir.join("metrics.json").exists());

    let def = serde_json::json!({
        "members": heads.iter().enumerate().map(|(i, h)| serde_json::json!({
            "name": format!("m{i}"), "head": h.file_name().unwrap().to_str().unwrap(), "backbone": "toypool",
        })).collect::<Vec<_>>(),
    });
    let def_path = d.join("ensemble.json");
    std::fs::write(&def_path, def.to_string()).unwrap();
    let ens_dir = d.join("ens");
    let f0 = format!("m0={}", s(&all));
    let with_files = ok(&["ensemble", "--manifest", m, "--definition", s(&def_path), "--features", &f0, "--out-dir", s(&ens_dir)]);
    assert_eq!(with_files["counts"]["tp"].as_f64().unwrap() + with_files["counts"]["fn"].as_f64().unwrap(), 6.0);
    let header = std::fs::read_to_string(ens_dir.join("predictions.csv")).unwrap();
    assert!(header.starts_with("sample_id,truth,m0_label,m0_score,m1_label"));
}

#[test]
fn run_and_report_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--n-pos", "6", "--n-neg", "6", "--seed", "2", "--side", "48", "--out", s(&d.join("corpus"))]);
    let cfg = d.join("run.toml");
    std::fs::write(
        &cfg,
        r#"
manifest = "corpus/manifest.csv"
output_dir = "out"
folds = 3
stratified = true
positive_class = "covid"
augment_copies = 1

[[members]]
name = "a"
backbone = "toypool"

[seeds]
split = 1
init = 2
train = 3
augment = 4

[augment]
enabled = true
flip_x_prob = 0.5
flip_y_prob = 0.0
rotation_range_deg = 10.0
shear_range = 0.3

[train]
epochs = 4
batch_size = 4
learning_rate = 0.05
shuffle = true
"#,
    )
    .unwrap();
    let out = d.join("override_out");
    let v = ok(&["run", "--config", s(&cfg), "--folds", "2", "--output-dir", s(&out), "--member", "x=toypool", "--member", "y=toypool"]);
    assert_eq!(v["k"].as_u64(), Some(2));
    let models: Vec<&str> = v["models"].as_array().unwrap().iter().map(|m| m["model"].as_str().unwrap()).collect();
    assert_eq!(models, ["x", "y", "ensemble"]);
    assert!(out.join("summary.json").exists() && !out.join("RUN_INCOMPLETE").exists());
    assert!(!d.join("out").exists());

    let again = d.join("again");
    let r = ok(&["report", "--summary", s(&out.join("summary.json")), "--out", s(&again)]);
    assert!(r["written"].as_array().unwrap().len() >= 5);
    assert_eq!(std::fs::read(out.join("report.md")).unwrap(), std::fs::read(again.join("report.md")).unwrap());
}

#[test]
fn failures_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("missing.csv");
    assert_eq!(err(&["plan-folds", "--manifest", s(&missing), "--folds", "2", "--split-seed", "1", "--stratified", "true"])["kind"], "manifest");
    assert_eq!(err(&["plan-folds", "--manifest", s(&missing)])["kind"], "usage");
    assert_eq!(err(&["run", "--config", s(&d.join("nope.toml"))])["kind"], "config");
    let e = err(&["run", "--manifest", s(&missing)]);
    assert_eq!(e["kind"], "config");
    assert!(e["message"].as_str().unwrap().contains("missing field"), "{e}");
    assert_eq!(err(&["extract", "--manifest", s(&missing), "--backbone", s(&d.join("none.json")), "--out", s(&d.join("f"))])["kind"], "manifest");
    assert!(!cli(&["no-such-command"]).status.success());
}
