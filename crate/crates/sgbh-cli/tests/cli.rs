//! End-to-end checks of the binary: exit codes, determinism contracts and
//! machine-readable diagnostics.

use std::path::Path;
use std::process::{Command, Output};

fn sgbh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgbh"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = r#"
experiment = "simulate"
seed = 5
ensemble_size = 3
output_dir = "unused"
observables = ["l2_sq"]

[model]
nu = 1.0
alpha = 1.0
beta = 1.0
gamma = 0.5
delta = 1.0

[noise]
power_law = { c_lo = 0.05, c_hi = 0.4, eps = 0.25 }

[solver]
n_modes = 8
dt = 0.002
t_end = 0.3
scheme = "mild_exponential"
record_stride = 10
"#;

#[test]
fn simulate_exits_zero_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = sgbh(&["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("manifest.json").exists());
    assert!(out_dir.join("report.json").exists());
    assert!(out_dir.join("traj_000.csv").exists());
}

#[test]
fn malformed_config_exits_2_with_json_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = \"simulate\"\nnot really toml [");
    let out = sgbh(&["simulate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let diag: serde_json::Value =
        serde_json::from_slice(&out.stderr).expect("stderr is machine-readable JSON");
    assert_eq!(diag["error"], "config");
}

#[test]
fn out_of_window_tilt_exits_nonzero_citing_the_window() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{}\n[exp_moment]\nlambda0 = 1e9\ntimes = [0.2]\n",
        SMALL
            .replace("experiment = \"simulate\"", "experiment = \"exp-moment\"")
            .replace("ensemble_size = 3", "ensemble_size = 1000")
    );
    let cfg = write_config(dir.path(), &body);
    let out = sgbh(&["exp-moment", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("admissible window"), "stderr: {msg}");
}

#[test]
fn regime_gate_exits_2_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("delta = 1.0", "delta = 3.0");
    let cfg = write_config(dir.path(), &body);
    let out = sgbh(&["simulate", "--config", &cfg, "--out", dir.path().join("a").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = sgbh(&[
        "simulate",
        "--config",
        &cfg,
        "--override-regime",
        "--out",
        dir.path().join("b").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // A huge state with a coarse step makes the frozen-drift update overshoot.
    let body = SMALL
        .replace("beta = 1.0", "beta = 8.0")
        .replace("dt = 0.002", "dt = 0.15")
        .replace("t_end = 0.3", "t_end = 7.5")
        .replace(
            "record_stride = 10",
            "record_stride = 1\n\n[initial]\nmodes = [40.0]",
        );
    let cfg = write_config(dir.path(), &body);
    let out = sgbh(&["simulate", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let diag: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(diag["error"], "diverged");
}

#[test]
fn fixed_seed_reruns_are_byte_identical_and_seeds_differ() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = |out: &Path, seed: &str, workers: &str| {
        let st = sgbh(&[
            "simulate", "--config", &cfg, "--seed", seed, "--workers", workers, "--out",
            out.to_str().unwrap(),
        ]);
        assert!(st.status.success());
    };
    let (a, b, c, d) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
        dir.path().join("d"),
    );
    run(&a, "9", "1");
    run(&b, "9", "1");
    run(&c, "9", "4");
    run(&d, "10", "1");
    for name in ["traj_000.csv", "traj_002.csv", "report.json"] {
        let fa = std::fs::read(a.join(name)).unwrap();
        assert_eq!(fa, std::fs::read(b.join(name)).unwrap(), "rerun changed {name}");
        assert_eq!(fa, std::fs::read(c.join(name)).unwrap(), "workers changed {name}");
    }
    assert_ne!(
        std::fs::read(a.join("traj_000.csv")).unwrap(),
        std::fs::read(d.join("traj_000.csv")).unwrap(),
        "different seeds must differ"
    );
}

#[test]
fn sweep_writes_aggregated_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("sweep");
    let out = sgbh(&[
        "simulate",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--sweep-axis",
        "solver.t_end",
        "--sweep-values",
        "0.1,0.2",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(out_dir.join("sweep_001/manifest.json").exists());
}
