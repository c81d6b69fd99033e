use std::path::Path;
use std::process::{Command, Output};

use cbf_kit::{CbfModel, CbfOperator, ControlAffineSystem, Environment, InputNormalizer, ModelConfig};

fn cbf_kit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbf-kit"))
        .args(args)
        .env("CBF_KIT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn zero_checkpoint(dir: &Path, env: Environment) -> std::path::PathBuf {
    let system = ControlAffineSystem::double_integrator();
    let dim = 2 + env.env_dim();
    let model = CbfModel::zeros(ModelConfig::new(dim), InputNormalizer::identity(dim)).unwrap();
    let path = dir.join("zero.json");
    CbfOperator::new(model, system, env).unwrap().save(&path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(cbf_kit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cbf_kit(&["check"]).status.code(), Some(1));
    assert_eq!(cbf_kit(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_is_a_validation_error() {
    let out = cbf_kit(&["check", "--checkpoint", "/nonexistent/ckpt.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ckpt.json"));
}

#[test]
fn zero_horizon_scenario_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_checkpoint(dir.path(), Environment::arena());
    let scenario = dir.path().join("s.json");
    std::fs::write(
        &scenario,
        format!(
            r#"{{"system": "double_integrator", "checkpoint": "{}", "start": [4.0, 0.0],
                "target": [5.0], "horizon": 0}}"#,
            s(&ckpt)
        ),
    )
    .unwrap();
    let out = cbf_kit(&["simulate", "--scenario", s(&scenario), "--out", s(&dir.path().join("t.csv"))]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    // Referenced relative to the scenario file.
    zero_checkpoint(dir.path(), Environment::arena());
    let scenario = dir.path().join("s.json");
    std::fs::write(
        &scenario,
        r#"{"system": "double_integrator", "checkpoint": "zero.json", "start": [4.0, 0.0],
            "target": [5.0], "horizon": 20}"#,
    )
    .unwrap();
    let csv = dir.path().join("t.csv");
    let out = cbf_kit(&["simulate", "--scenario", s(&scenario), "--out", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("step,t,x0,x1,u_ref0,u0,status,h,c\n"));
    assert_eq!(text.lines().count(), 21);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps"], 20);
}

#[test]
fn grid_writes_header_and_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_checkpoint(dir.path(), Environment::arena_one_circle());
    let csv = dir.path().join("g.csv");
    let out = cbf_kit(&[
        "grid",
        "--checkpoint",
        s(&ckpt),
        "--env",
        "[1.5, 5.0, 0.0]",
        "--axes",
        "0:0:10:11",
        "1:-5:5:6",
        "--out",
        s(&csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x0,x1,h,c"));
    assert_eq!(lines.count(), 66);

    let bad = cbf_kit(&["grid", "--checkpoint", s(&ckpt), "--env", "[1.5]", "--axes", "0:0:10:11", "1:-5:5:6", "--out", s(&csv)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn check_passes_on_zero_weights() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_checkpoint(dir.path(), Environment::arena_two_circles());
    let out = cbf_kit(&["check", "--checkpoint", s(&ckpt), "--samples", "200"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["containment_violations"], 0);
}

#[test]
fn train_then_check_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{
            "system": {"name": "double_integrator"},
            "environment": {"preset": "arena_one_circle"},
            "dataset": {"environments": 2, "states": 64},
            "model": {"hidden_layers": 2, "hidden_width": 8},
            "train": {"epochs": 3, "batch_size": 32, "seed": 3}
        }"#,
    )
    .unwrap();
    let ckpt = dir.path().join("out/model.json");
    let out = cbf_kit(&["train", "--config", s(&config), "--out", s(&ckpt), "--log-every", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps"], 12);
    let history = std::fs::read_to_string(dir.path().join("out/model.json.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 13);
    let op = CbfOperator::load(&ckpt).unwrap();
    assert_eq!(op.env_dim(), 3);
    assert_eq!(op.training.as_ref().unwrap()["step"], 12);

    let check = cbf_kit(&["check", "--checkpoint", s(&ckpt), "--samples", "100"]);
    assert!(check.status.success(), "{}", String::from_utf8_lossy(&check.stderr));

    // Same seed, same weights.
    let again = dir.path().join("again.json");
    cbf_kit(&["train", "--config", s(&config), "--out", s(&again), "--log-every", "0"]);
    assert_eq!(
        CbfOperator::load(&again).unwrap().model.params,
        op.model.params
    );
}

#[test]
fn oracle_writes_mask() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("o.csv");
    let out = cbf_kit(&[
        "oracle",
        "--resolution",
        "21",
        "--margin-cells",
        "4",
        "--out",
        s(&csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x0,x1,value,c,safe"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 441);
    // Stopped at the wall: safe. Fast towards it from nearby: not.
    let at = |x: f64, v: f64| {
        rows.iter()
            .find(|r| (r[0] - x).abs() < 1e-9 && (r[1] - v).abs() < 1e-9)
            .unwrap()[4]
    };
    assert_eq!(at(5.0, 0.0), 1.0);
    assert_eq!(at(9.5, 5.0), 0.0);
}
