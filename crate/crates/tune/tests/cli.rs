use std::path::{Path, PathBuf};
use std::process::Command;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tune() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tune"))
}

#[test]
fn batch_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curves.csv");
    let status = tune()
        .args(["batch", "--runs", "2", "--iters", "3", "--mode", "all", "--noise", "0.9", "--seed", "5"])
        .arg("--config")
        .arg(configs().join("cassie-sim.toml"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,mode,mean_error,stderr");
    assert_eq!(lines.len(), 1 + 3 * 3);
    assert!(lines[9].starts_with("3,random,"));
}

#[test]
fn batch_rejects_unknown_mode() {
    let output = tune()
        .args(["batch", "--mode", "both"])
        .arg("--config")
        .arg(configs().join("cassie-sim.toml"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("unknown mode"));
}

#[test]
fn episode_prints_metrics() {
    let output = tune()
        .args(["episode", "--gains", "[1000, 100]", "--duration", "0.5"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert!(metrics["tracking_rms"].as_f64().unwrap() > 0.0);
    assert_eq!(metrics["failed"], false);

    let bad = tune().args(["episode", "--gains", "[1, 2, 3]"]).output().unwrap();
    assert!(!bad.status.success());
}
