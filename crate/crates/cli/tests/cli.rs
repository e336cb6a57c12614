use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn opteq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opteq")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(lr: f64, epochs: usize) -> String {
    format!(
        r#"{{
  "seed": 11,
  "model": {{"input_dim": 2, "hidden": 6, "outputs": 2, "activation": "tanh", "alpha": 0.8}},
  "solver": {{"mode": "picard", "steps": 8}},
  "training": {{
    "loss": {{"kind": "softmax_cross_entropy"}},
    "lr": {{"initial": {lr}}},
    "epochs": {epochs},
    "batch_size": 8,
    "holdout": 6,
    "gradient": "unrolled"
  }},
  "dataset": {{"generator": "two_moons", "n": 30, "noise": 0.1}},
  "output": {{"metrics": "metrics.csv", "checkpoint": "model.json"}}
}}"#
    )
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn train(dir: &Path) -> Output {
    let cfg = write_config(dir, &config(0.2, 4));
    opteq(&["train", cfg.to_str().unwrap()])
}

#[test]
fn verify_single_suite_passes() {
    let o = opteq(&["verify", "factorization"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("[PASS] factor-residual/"));
    assert!(!out.contains("[FAIL]"));
    assert!(out.trim_end().ends_with("checks passed"));
}

#[test]
fn verify_unknown_suite_prints_usage() {
    let o = opteq(&["verify", "nosuch"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("nosuch") && err.contains("block-lift"), "{err}");
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("trained 4 epochs: final loss "));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,split,loss,residual_mean,reg_value,lr,wallclock_ms"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    assert!(rows[1].starts_with("0,eval,"));
    assert!(dir.path().join("model.json").is_file());
}

#[test]
fn identical_configs_give_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(train(a.path()).status.success());
    assert!(train(b.path()).status.success());
    for f in ["metrics.csv", "model.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between runs");
    }
}

#[test]
fn config_typo_reports_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &config(0.2, 4).replace("\"epochs\"", "\"epoch\""));
    let o = opteq(&["train", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("training.epoch"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_nonzero_and_keeps_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &config(1e9, 20));
    let o = opteq(&["train", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
    assert!(!dir.path().join("model.json").exists());
}

#[test]
fn solve_prints_equilibrium_json_and_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path()).status.success());
    let ckpt = dir.path().join("model.json");
    let traj = dir.path().join("traj.csv");
    let o = opteq(&[
        "solve",
        ckpt.to_str().unwrap(),
        "0.3,-0.7",
        "--tol",
        "1e-10",
        "--emit-trajectory",
        traj.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mode"], "picard");
    assert_eq!(v["converged"], true);
    assert!(v["residual"].as_f64().unwrap() <= 1e-10);
    assert_eq!(v["equilibrium"].as_array().unwrap().len(), 6);
    assert_eq!(v["output"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(&traj).unwrap();
    assert_eq!(csv.lines().next(), Some("iteration,residual"));
    assert_eq!(csv.lines().count() as u64, v["iterations"].as_u64().unwrap() + 2);
}

#[test]
fn solve_sam_mode_and_input_file() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path()).status.success());
    let ckpt = dir.path().join("model.json");
    let input = dir.path().join("x.json");
    std::fs::write(&input, "[0.3, -0.7]").unwrap();
    let o = opteq(&["solve", ckpt.to_str().unwrap(), input.to_str().unwrap(), "--mode", "sam", "--steps", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mode"], "sam");
    assert_eq!(v["iterations"], 50);
    assert_eq!(v["regularizer"]["kind"], "squared_l2");
}

#[test]
fn solve_rejects_wrong_input_dimension() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path()).status.success());
    let o = opteq(&["solve", dir.path().join("model.json").to_str().unwrap(), "1,2,3"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("expects 2"), "{}", stderr(&o));
}

#[test]
fn factorize_reconstructs_chain() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path()).status.success());
    let ckpt = dir.path().join("model.json");
    let o = opteq(&["factorize", ckpt.to_str().unwrap(), "--width", "12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let res = v["relative_residuals"].as_array().unwrap();
    assert_eq!(res.len(), 2);
    assert!(res.iter().all(|r| r.as_f64().unwrap() < 1e-8));
    assert!(v["max_forward_gap"].as_f64().unwrap() < 1e-7);
    assert_eq!(v["factors"].as_array().unwrap().len(), 3);

    let o = opteq(&["factorize", ckpt.to_str().unwrap(), "--width", "11"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("twice the widest layer"));
}
