//! End-to-end runs of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

fn energyscape(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_energyscape")).args(args).output().unwrap()
}

fn synth(dir: &Path) {
    let out = energyscape(&["synth", "--out", dir.to_str().unwrap(), "--seed", "5", "--subjects", "3", "--length", "80"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn full_run_writes_bundle() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("config.toml");
    let out = energyscape(&["run", "--config", cfg.to_str().unwrap(), "--reps", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let results = dir.path().join("results");
    for f in ["features.csv", "stats.csv", "status.csv", "outputs.csv", "classify/summary.csv", "classify/top_s.csv"] {
        assert!(results.join(f).is_file(), "{f}");
    }
    let listed = std::fs::read_to_string(results.join("outputs.csv")).unwrap();
    assert!(listed.lines().any(|l| l.starts_with("features.csv,")));
}

#[test]
fn missing_series_file_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    std::fs::remove_file(dir.path().join("series/sub-01.csv")).unwrap();
    let cfg = dir.path().join("config.toml");
    let out = energyscape(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sub-01.csv"));
}

#[test]
fn bad_flags_are_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("config.toml");
    assert_eq!(code(&energyscape(&["run", "--config", cfg.to_str().unwrap(), "--fraction", "0.7"])), 2);
    assert_eq!(code(&energyscape(&["run", "--config", cfg.to_str().unwrap(), "--window", "4"])), 2);
    assert_eq!(code(&energyscape(&["run", "--config", "/nonexistent/config.toml"])), 2);
}

#[test]
fn fit_without_binarize_is_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("config.toml");
    let out = energyscape(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&energyscape(&["classify", "--config", cfg.to_str().unwrap()])), 4);
}

#[test]
fn stages_run_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("config.toml");
    for stage in ["cluster", "binarize", "fit", "landscape", "stats"] {
        let out = energyscape(&[stage, "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = energyscape(&["classify", "--config", cfg.to_str().unwrap(), "--reps", "1"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn all_fits_rejected_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("config.toml");
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text = text.replace("acceptance_threshold = 0.8", "acceptance_threshold = 1.0");
    assert!(text.contains("acceptance_threshold = 1.0"));
    std::fs::write(&cfg, text).unwrap();
    let out = energyscape(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let status = std::fs::read_to_string(dir.path().join("results/status.csv")).unwrap();
    assert!(status.contains(",fit,rejected,"));
}
