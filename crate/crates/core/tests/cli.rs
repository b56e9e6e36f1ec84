// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 9

[reservoir]
kind = "linear"
n = 4
spectral_radius = 0.5
whiten = true

[sim]
T = 3000
washout = 200
realizations = 1

[basis]
max_degree = 2
max_delay = 6
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ipc-lab"));
    c.env_remove("IPC_LAB_SEED");
    c
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn simulate_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(run("simulate", &cfg, &a, &[]).status.success());
    assert!(run("simulate", &cfg, &b, &[]).status.success());
    assert!(run("simulate", &cfg, &c, &["--seed", "10"]).status.success());
    let out_a = read(a.join("outputs.csv"));
    assert_eq!(out_a, read(b.join("outputs.csv")));
    assert_ne!(out_a, read(c.join("outputs.csv")));
    assert_eq!(out_a.lines().count(), 3001);
    assert!(out_a.starts_with("t,x0,x1,x2,x3\n"));
    assert_eq!(read(a.join("inputs.csv")).lines().count(), 3001);

    let manifest: serde_json::Value = serde_json::from_str(&read(a.join("manifest.json"))).unwrap();
    assert_eq!(manifest["master_seed"], 9);
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_precedence_flag_over_env_over_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let seed_of = |out: &Path| -> u64 {
        let m: serde_json::Value = serde_json::from_str(&read(out.join("manifest.json"))).unwrap();
        m["master_seed"].as_u64().unwrap()
    };
    let env_out = dir.path().join("env");
    let st = bin()
        .env("IPC_LAB_SEED", "77")
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&env_out)
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(seed_of(&env_out), 77);

    let flag_out = dir.path().join("flag");
    let st = bin()
        .env("IPC_LAB_SEED", "77")
        .args(["simulate", "--seed", "5", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&flag_out)
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(seed_of(&flag_out), 5);
}

#[test]
fn divergent_reservoir_exits_with_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL
        .replace("spectral_radius = 0.5", "spectral_radius = 1.5")
        .replace("whiten = true", "")
        .replace("T = 3000", "T = 100")
        .replace("washout = 200", "washout = 1000");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = run("simulate", &cfg, &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("overflowed at step"), "{err}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let zero = write_config(dir.path(), "zero.toml", &SMALL.replace("max_degree = 2", "max_degree = 0"));
    assert_eq!(run("ipc", &zero, &dir.path().join("o"), &[]).status.code(), Some(2));

    let typo = write_config(dir.path(), "typo.toml", &SMALL.replace("washout = 200", "washout = 200\nwashot = 1"));
    let out = run("ipc", &typo, &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("washot") && err.contains("line"), "{err}");

    let missing = dir.path().join("nope.toml");
    assert_eq!(run("ipc", &missing, &dir.path().join("o"), &[]).status.code(), Some(2));

    assert_eq!(bin().arg("frobnicate").status().unwrap().code(), Some(2));
}

#[test]
fn ipc_writes_one_row_per_target() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("o");
    assert!(run("ipc", &cfg, &out, &[]).status.success());
    // C(6 + 1 + 2, 2) − 1 targets plus a header.
    let csv = read(out.join("capacities.csv"));
    assert_eq!(csv.lines().count(), 35 + 1);
    assert!(csv.starts_with("index,raw,thresholded\n0^1,"));
    let summary: serde_json::Value = serde_json::from_str(&read(out.join("ipc.json"))).unwrap();
    let ipc = summary["ipc_total"].as_f64().unwrap();
    assert!((ipc - 4.0).abs() < 0.1, "{ipc}");
}

#[test]
fn single_realization_with_noise_cannot_separate() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n[noise]\nlocation = \"output\"\nsigma = 0.5\n");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = run("bound", &cfg, &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("single realization"));
}

#[test]
fn bound_reports_pass_for_noisy_whitened_reservoir() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("realizations = 1", "realizations = 10")
        + "\n[noise]\nlocation = \"output\"\nvariances = [0.1, 0.5, 1.0, 2.0]\n";
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = dir.path().join("o");
    let o = run("bound", &cfg, &out, &["--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(out.join("bound.csv"));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "sweep_value,n,T,R,D,ipc_measured,ipc_bound,bound_fullrank,margin,tol_stat,pass,seed,note"
    );
    assert!(lines.next().unwrap().contains(",true,"));
    let detail: serde_json::Value = serde_json::from_str(&read(out.join("bound.json"))).unwrap();
    assert_eq!(detail["q_xi_tilde_eigenvalues"].as_array().unwrap().len(), 4);
}

#[test]
fn noiseless_sweep_point_bound_equals_n() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("realizations = 1", "realizations = 4")
        + "\n[noise]\nlocation = \"output\"\nsigma = 0.3\n\n[sweep]\nparameter = \"noise.sigma\"\nvalues = [0.0, 0.5]\n";
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = dir.path().join("o");
    let o = run("sweep", &cfg, &out, &["--jobs", "2"]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(1));
    let mut rdr = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][col("sweep_value")], "0.0");
    assert_eq!(rows[0][col("ipc_bound")].parse::<f64>().unwrap(), 4.0);
    assert!(rows[1][col("ipc_bound")].parse::<f64>().unwrap() < 4.0);
    assert!(out.join("points/point_000.json").exists());
    assert!(out.join("points/point_001.json").exists());
}

#[test]
fn sweep_is_independent_of_job_count() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("realizations = 1", "realizations = 3")
        + "\n[noise]\nlocation = \"state\"\nsigma = 0.1\n\n[sweep]\nparameter = \"noise.sigma\"\nvalues = [0.1, 0.2, 0.4]\n";
    let cfg = write_config(dir.path(), "c.toml", &text);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run("sweep", &cfg, &a, &["--jobs", "1"]);
    run("sweep", &cfg, &b, &["--jobs", "3"]);
    assert_eq!(read(a.join("sweep.csv")), read(b.join("sweep.csv")));
}

#[test]
fn selftest_passes_and_fails_at_zero_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let ok = bin().args(["selftest", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(read(dir.path().join("selftest.csv")).lines().count() > 5);
    let bad = bin().args(["selftest", "--tol-scale", "0"]).output().unwrap().status;
    assert_eq!(bad.code(), Some(1));
}
