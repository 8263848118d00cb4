//! Interface contract tests: exit codes, byte-stable outputs, and the
//! classical reduction at the file level.

use std::path::Path;
use std::process::Command;

fn rkb() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rkb"))
}

fn write_config(dir: &Path, steps: usize, mu: f64) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        format!(
            "n = 1\nm = 1\nB = 0.0\nH = 1.0\nb = 0.0\nh = 0.0\nQ = 1.0\nR = 1.0\nx0 = 0.0\nT = 1.0\nN = {steps}\nmu = {mu}\nepsilon = 0.5\n\n[run]\nseed = 11\nn_paths = 50\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn selfcheck_exits_zero_on_the_bundled_config() {
    let out = rkb().arg("selfcheck").output().unwrap();
    assert!(out.status.success(), "stdout: {}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("passed"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn malformed_config_exits_one_with_the_violation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let good = std::fs::read_to_string(write_config(dir.path(), 50, 0.2)).unwrap();
    std::fs::write(&path, good.replace("R = 1.0", "R = 0.0")).unwrap();
    let out = rkb()
        .args(["--config", path.to_str().unwrap(), "simulate", "--out", "x.csv"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("positive definite"), "stderr: {err}");
}

#[test]
fn unknown_subcommand_exits_one() {
    let out = rkb().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_is_byte_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 50, 0.2);
    let run = |out_name: &str, seed: &str| {
        let status = rkb()
            .args([
                "--config",
                config.to_str().unwrap(),
                "--out-dir",
                dir.path().to_str().unwrap(),
                "--seed",
                seed,
                "simulate",
                "--theta",
                "const:0.1,-0.1",
                "--paths",
                "5",
                "--out",
                out_name,
            ])
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(dir.path().join(out_name)).unwrap()
    };
    let a = run("a.csv", "7");
    let b = run("b.csv", "7");
    let c = run("c.csv", "8");
    assert_eq!(a, b, "same seed must give byte-identical output");
    assert_ne!(a, c, "different seeds must differ");
}

#[test]
fn robust_filter_with_zero_mu_reproduces_filter_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 200, 0.0);
    let base = [
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ];
    let status = rkb()
        .args(base)
        .args(["simulate", "--paths", "1", "--out", "paths.csv", "--obs-out", "obs.csv"])
        .status()
        .unwrap();
    assert!(status.success());

    let status = rkb()
        .args(base)
        .args(["filter", "--obs", "obs.csv", "--out", "classical.csv"])
        .status()
        .unwrap();
    assert!(status.success());

    let out = rkb()
        .args(base)
        .args([
            "robust-filter",
            "--generator",
            "hyperbolic:1.0",
            "--mu",
            "0.0",
            "--obs",
            "obs.csv",
            "--out",
            "robust.csv",
            "--report",
            "report.json",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());

    let classical = std::fs::read(dir.path().join("classical.csv")).unwrap();
    let robust = std::fs::read(dir.path().join("robust.csv")).unwrap();
    assert_eq!(classical, robust, "mu = 0 must reduce to the classical filter bitwise");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["gap"].as_f64().unwrap(), 0.0);
    assert!(report.get("lower_value").is_some());
    assert!(report.get("upper_value").is_some());
}

#[test]
fn robust_filter_report_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 100, 0.3);
    let run = |name: &str| {
        let status = rkb()
            .args([
                "--config",
                config.to_str().unwrap(),
                "--out-dir",
                dir.path().to_str().unwrap(),
                "robust-filter",
                "--generator",
                "hyperbolic:1.0",
                "--report",
                name,
            ])
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(dir.path().join(name)).unwrap()
    };
    assert_eq!(run("r1.json"), run("r2.json"));
}

#[test]
fn mmse_finite_solves_the_two_point_example() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("space.json"),
        r#"{"prob": [0.5, 0.5], "densities": [[1.0, 1.0], [1.5, 0.5]], "penalties": [0.0, 0.1], "p": 2.0, "partition": [0, 0]}"#,
    )
    .unwrap();
    std::fs::write(dir.path().join("xi.csv"), "xi\n1.0\n0.0\n").unwrap();
    let out = rkb()
        .args([
            "--out-dir",
            dir.path().to_str().unwrap(),
            "mmse-finite",
            "--space",
            "space.json",
            "--xi",
            "xi.csv",
            "--out",
            "result.json",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("result.json")).unwrap())
            .unwrap();
    assert!((doc["value"].as_f64().unwrap() - 0.25).abs() < 1e-8);
    assert!((doc["eta_blocks"][0].as_f64().unwrap() - 0.5).abs() < 1e-8);
    assert!(doc["saddle_gap"].as_f64().unwrap().abs() < 1e-8);
}

#[test]
fn dual_check_prints_a_csv_row() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 16, 0.2);
    let out = rkb()
        .args([
            "--config",
            config.to_str().unwrap(),
            "dual-check",
            "--generator",
            "hyperbolic:1.0",
            "--paths",
            "500",
            "--family",
            "5",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "bsde_value,bsde_se,dual_value,dual_se,gap,gap_se");
    let row = lines.next().unwrap();
    assert_eq!(row.split(',').count(), 6);
    for field in row.split(',') {
        field.parse::<f64>().unwrap();
    }
}

#[test]
fn missing_seed_for_stochastic_subcommand_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 20, 0.2);
    let text = std::fs::read_to_string(&config).unwrap();
    std::fs::write(&config, text.replace("seed = 11\n", "")).unwrap();
    let out = rkb()
        .args(["--config", config.to_str().unwrap(), "simulate", "--out", "x.csv"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn out_dir_env_variable_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 20, 0.2);
    let sub = dir.path().join("env_out");
    let status = rkb()
        .args([
            "--config",
            config.to_str().unwrap(),
            "simulate",
            "--paths",
            "2",
            "--out",
            "sim.csv",
        ])
        .env("RKB_OUT_DIR", &sub)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(sub.join("sim.csv").exists());
}
