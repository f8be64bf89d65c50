use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use soundfield::config::ExperimentConfig;
use soundfield::geometry::gen_static;
use soundfield::room::RirSet;
use soundfield::solve::SolveMethod;
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soundfield"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(name);
    cfg.save(&path).unwrap();
    path
}

fn mnsm_from(stdout: &str) -> f64 {
    let line = stdout.lines().find(|l| l.starts_with("MNSM = ")).expect("MNSM line");
    line.trim_start_matches("MNSM = ")
        .trim_end_matches(" dB")
        .parse()
        .unwrap()
}

#[test]
fn simulate_writes_default_plane_grid() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(dir.path(), &["simulate", "--out", "truth.sfr"]);
    assert!(stdout.contains("N = 25"));
    assert!(stdout.contains("nyquist_spacing = 0.042875"));
    let rirs = RirSet::read_sfr(dir.path().join("truth.sfr")).unwrap();
    assert_eq!(rirs.rows(), 25);
    assert_eq!(rirs.length(), 500);
}

#[test]
fn pipeline_reports_mnsm_and_solvers_agree() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = ExperimentConfig::proof_of_concept();
    let dec = write_config(d, "dec.toml", &cfg);
    let mut full_cfg = cfg.clone();
    full_cfg.solver.method = SolveMethod::FullLs;
    let full = write_config(d, "full.toml", &full_cfg);
    let (dec, full) = (dec.to_str().unwrap(), full.to_str().unwrap());

    ok(d, &["--config", dec, "simulate", "--out", "truth.sfr"]);
    ok(d, &["--config", dec, "trajectory", "--out", "traj.csv"]);
    ok(
        d,
        &[
            "--config",
            dec,
            "measure",
            "--trajectory",
            "traj.csv",
            "--out",
            "meas.csv",
        ],
    );
    let a = mnsm_from(&ok(
        d,
        &[
            "--config",
            dec,
            "reconstruct",
            "--measurement",
            "meas.csv",
            "--truth",
            "truth.sfr",
            "--out",
            "dec.sfr",
        ],
    ));
    let b = mnsm_from(&ok(
        d,
        &[
            "--config",
            full,
            "reconstruct",
            "--measurement",
            "meas.csv",
            "--truth",
            "truth.sfr",
            "--out",
            "full.sfr",
        ],
    ));
    assert!((a - b).abs() < 0.01, "decoupled {a} dB vs full {b} dB");
    assert!(a < -10.0, "decoupled {a} dB");

    let diag = fs::read_to_string(d.join("dec.sfr.diagnostics.csv")).unwrap();
    assert!(diag.starts_with("metric,value,unit\n"));
    assert!(diag.lines().any(|l| l.starts_with("mnsm,")));
    let blocks = fs::read_to_string(d.join("dec.sfr.blocks.csv")).unwrap();
    assert_eq!(blocks.lines().count(), 1 + 63);

    let c = mnsm_from(&ok(
        d,
        &[
            "evaluate",
            "--truth",
            "truth.sfr",
            "--estimate",
            "dec.sfr",
            "--out",
            "eval.csv",
        ],
    ));
    assert!((a - c).abs() < 1e-3);
}

#[test]
fn commands_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "c.toml", &ExperimentConfig::proof_of_concept());
    let cfg = cfg.to_str().unwrap();
    for out in ["m1.csv", "m2.csv"] {
        ok(d, &["--config", cfg, "--seed", "9", "measure", "--out", out]);
    }
    assert_eq!(fs::read(d.join("m1.csv")).unwrap(), fs::read(d.join("m2.csv")).unwrap());
    assert_eq!(
        fs::read(d.join("m1.csv.traj.csv")).unwrap(),
        fs::read(d.join("m2.csv.traj.csv")).unwrap()
    );
    ok(d, &["--config", cfg, "--seed", "10", "measure", "--out", "m3.csv"]);
    assert_ne!(fs::read(d.join("m1.csv")).unwrap(), fs::read(d.join("m3.csv")).unwrap());
}

#[test]
fn predict_mmse_writes_profile() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "c.toml", &ExperimentConfig::proof_of_concept());
    let stdout = ok(
        d,
        &["--config", cfg.to_str().unwrap(), "predict-mmse", "--out", "p.csv"],
    );
    assert!(stdout.starts_with("MMSE = "));
    let profile = fs::read_to_string(d.join("p.csv")).unwrap();
    assert!(profile.starts_with("sample,sum_phi2\n"));
    assert_eq!(profile.lines().count(), 1 + 63 * 6 * 3);
}

#[test]
fn missing_input_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let out = run(
        dir.path(),
        &["evaluate", "--truth", "nope.sfr", "--estimate", "nope.sfr"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let mut cfg = ExperimentConfig::proof_of_concept();
    cfg.measurement.rir_length = 1000;
    let text = cfg.to_toml_string().unwrap();
    fs::write(dir.path().join("bad.toml"), text).unwrap();
    let out = run(dir.path(), &["--config", "bad.toml", "trajectory"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rir_length"));
}

#[test]
fn singular_system_is_a_numerical_error() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = ExperimentConfig::proof_of_concept();
    let path = write_config(d, "c.toml", &cfg);
    let samples = cfg.measurement.periods * 63;
    gen_static(&[cfg.grid.position(4)], samples)
        .unwrap()
        .save_csv(d.join("one.csv"))
        .unwrap();
    let cfg = path.to_str().unwrap();
    ok(
        d,
        &["--config", cfg, "measure", "--trajectory", "one.csv", "--out", "m.csv"],
    );
    let out = run(d, &["--config", cfg, "reconstruct", "--measurement", "m.csv"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_subcommand_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
}
