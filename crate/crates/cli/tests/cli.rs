use std::path::Path;
use std::process::Command;

use cml_lab::manifest::{sha256_hex, Manifest};
use cml_lab::{run, summary, CliError, RunOptions, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION};
use serde_json::{json, Value};

fn zigzag() -> Value {
    json!({
        "singularities": [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
        "branches": [
            {"kind": "linear", "a": 3.0, "b": 0.0},
            {"kind": "linear", "a": -3.0, "b": 2.0},
            {"kind": "linear", "a": 3.0, "b": -2.0}
        ]
    })
}

fn lattice(l: usize, eps: f64) -> Value {
    json!({"d": 1, "L": l, "eps": eps, "r": 1, "coupling": "diffusive", "map": zigzag()})
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn run_in(dir: &Path, cfg: &Value, out: &str, workers: Option<usize>) -> cml_lab::RunOutcome {
    let path = write_config(dir, &format!("{out}.json"), cfg);
    run(
        &path,
        &RunOptions {
            workers,
            out: Some(dir.join(out)),
        },
    )
}

fn read_report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn eps_above_eps_max_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "lattice": lattice(8, 0.2),
        "experiment": {"kind": "check-coupling", "params": {}}
    });
    let out = run_in(tmp.path(), &cfg, "bad", None);
    assert_eq!(out.exit_code, EXIT_VALIDATION);
    let msg = out.error.unwrap().to_string();
    assert!(msg.contains("eps"), "{msg}");
    let m = Manifest::read(&tmp.path().join("bad")).unwrap();
    assert_eq!(m.status, "validation_error");
    assert_eq!(m.exit_code, EXIT_VALIDATION);
    assert!(m.error.unwrap().contains("eps"));
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    for cfg in [
        json!({"lattice": lattice(8, 0.0), "experiment": {"kind": "check-coupling", "params": {}}, "colour": 1}),
        json!({"lattice": lattice(8, 0.0), "experiment": {"kind": "check-coupling", "params": {"n_sample": 3}}}),
        json!({"lattice": lattice(8, 0.0), "experiment": {"kind": "teleport", "params": {}}}),
        json!({"lattice": lattice(8, 0.0), "observable": {"kind": "coordinate", "site": [0], "sight": 1},
               "experiment": {"kind": "simulate", "params": {"n": [4], "n_traj": 4}}}),
    ] {
        assert_eq!(run_in(tmp.path(), &cfg, "x", None).exit_code, EXIT_VALIDATION, "{cfg}");
    }
}

#[test]
fn observable_is_checked_against_the_lattice() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "lattice": lattice(8, 0.0),
        "observable": {"kind": "coordinate", "site": [0, 1]},
        "experiment": {"kind": "simulate", "params": {"n": [4], "n_traj": 4}}
    });
    assert_eq!(run_in(tmp.path(), &cfg, "x", None).exit_code, EXIT_VALIDATION);
    let missing = json!({
        "lattice": lattice(8, 0.0),
        "experiment": {"kind": "clt", "params": {"n": [4], "n_traj": 4}}
    });
    assert_eq!(run_in(tmp.path(), &missing, "y", None).exit_code, EXIT_VALIDATION);
}

#[test]
fn check_coupling_passes_on_diffusive() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "lattice": lattice(16, 0.03),
        "experiment": {"kind": "check-coupling", "params": {"n_samples": 100}},
        "seed": 4
    });
    let out = run_in(tmp.path(), &cfg, "cc", None);
    assert_eq!(out.exit_code, EXIT_OK, "{:?}", out.error);
    let rep = read_report(&tmp.path().join("cc"));
    assert_eq!(rep["all_ok"], json!(true));
    let text = summary::summarize(&tmp.path().join("cc")).unwrap();
    assert!(text.contains("[pass]"), "{text}");
}

#[test]
fn branch_loss_exits_with_numerical_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "lattice": lattice(5, 0.0),
        "observable": {"kind": "cos_coordinate", "site": [0]},
        "experiment": {"kind": "lambda-curve", "params": {"cells": 27, "build": "exact", "t_grid": [0.0, 1.0, 2.0]}}
    });
    let out = run_in(tmp.path(), &cfg, "lc", None);
    assert_eq!(out.exit_code, EXIT_NUMERICAL);
    let m = Manifest::read(&tmp.path().join("lc")).unwrap();
    assert_eq!(m.status, "numerical_error");
    assert!(m.error.unwrap().contains("overlap"));
}

#[test]
fn outputs_are_byte_identical_across_reruns_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "lattice": lattice(12, 0.02),
        "observable": {"kind": "product", "sites": [[0], [1]], "center": true, "center_samples": 20000},
        "experiment": {"kind": "clt", "params": {"n": [32, 64], "n_traj": 500, "n_burn": 50,
                                                 "sigma2": {"lags": 10, "n_avg": 20000}}},
        "seed": 99
    });
    let runs: Vec<_> = [(None, "a"), (Some(1), "b"), (Some(4), "c"), (Some(4), "d")]
        .into_iter()
        .map(|(w, name)| {
            let out = run_in(tmp.path(), &cfg, name, w);
            assert_eq!(out.exit_code, EXIT_OK, "{:?}", out.error);
            tmp.path().join(name)
        })
        .collect();
    for file in ["ks.csv", "report.json", "config.json"] {
        let first = std::fs::read(runs[0].join(file)).unwrap();
        for r in &runs[1..] {
            assert_eq!(
                first,
                std::fs::read(r.join(file)).unwrap(),
                "{file} differs in {}",
                r.display()
            );
        }
    }
}

#[test]
fn manifest_lists_every_output_with_its_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "lattice": lattice(8, 0.02),
        "experiment": {"kind": "spectrum", "params": {"cells": 27, "build": "monte_carlo",
                                                      "samples_per_cell": 50, "export_matrix": true}}
    });
    let out = run_in(tmp.path(), &cfg, "sp", None);
    assert_eq!(out.exit_code, EXIT_OK, "{:?}", out.error);
    let dir = tmp.path().join("sp");
    let m = Manifest::read(&dir).unwrap();
    let mut on_disk: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    let mut listed: Vec<String> = m.files.iter().map(|f| f.name.clone()).collect();
    listed.sort();
    assert_eq!(on_disk, listed);
    for f in &m.files {
        let bytes = std::fs::read(dir.join(&f.name)).unwrap();
        assert_eq!(sha256_hex(&bytes), f.sha256);
        assert_eq!(bytes.len() as u64, f.bytes);
    }
    assert!(m.stale_files(&dir).is_empty());
    std::fs::write(dir.join("stationary.csv"), "tampered").unwrap();
    assert_eq!(m.stale_files(&dir), vec!["stationary.csv".to_string()]);
}

#[test]
fn summary_of_llt_shows_ratio_per_interval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "lattice": lattice(4, 0.0),
        "observable": {"kind": "coordinate", "site": [0], "offset": 0.5},
        "experiment": {"kind": "llt", "params": {"n": [64], "n_traj": 2000,
                        "intervals": [[-0.5, 0.5], [0.0, 2.0]], "sigma2": {"value": 0.10416666666666667}}},
        "thresholds": {"llt_rel_tol": 0.5}
    });
    let out = run_in(tmp.path(), &cfg, "llt", None);
    assert_eq!(out.exit_code, EXIT_OK, "{:?}", out.error);
    let text = summary::summarize(&tmp.path().join("llt")).unwrap();
    assert!(text.contains("[-0.5, 0.5]") && text.contains("[0, 2]"), "{text}");
    assert!(text.contains("|I| 1.00000") && text.contains("|I| 2.00000"), "{text}");
}

#[test]
fn summary_of_variance_shows_three_estimates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "lattice": lattice(4, 0.0),
        "observable": {"kind": "coordinate", "site": [0], "offset": 0.5},
        "experiment": {"kind": "variance", "params": {"n": 64, "n_traj": 1000, "lags": 8, "n_avg": 50000,
                        "spectral": {"cells": 27, "build": "exact"}}},
        "thresholds": {"variance_rel_tol": 0.05}
    });
    let out = run_in(tmp.path(), &cfg, "var", None);
    assert_eq!(out.exit_code, EXIT_OK, "{:?}", out.error);
    let text = summary::summarize(&tmp.path().join("var")).unwrap();
    for m in ["ensemble", "green_kubo", "spectral"] {
        assert!(text.lines().any(|l| l.starts_with(m)), "{text}");
    }
    let rep = read_report(&tmp.path().join("var"));
    let spectral = rep["estimates"][2]["sigma2"].as_f64().unwrap();
    assert!((spectral - 5.0 / 48.0).abs() < 1e-3, "{spectral}");
}

#[test]
fn summary_needs_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(
        summary::summarize(tmp.path()),
        Err(CliError::MissingManifest(_))
    ));
    let status = Command::new(env!("CARGO_BIN_EXE_cml-lab"))
        .arg("summary")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("manifest"));
}

#[test]
fn binary_exit_codes_and_worker_env() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(
        tmp.path(),
        "bad.json",
        &json!({"lattice": lattice(8, 0.9), "experiment": {"kind": "check-coupling", "params": {}}}),
    );
    let bin = env!("CARGO_BIN_EXE_cml-lab");
    let st = Command::new(bin)
        .args(["run"])
        .arg(&bad)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(EXIT_VALIDATION));

    let good = write_config(
        tmp.path(),
        "good.json",
        &json!({"lattice": lattice(8, 0.01), "experiment": {"kind": "bv-suite", "params": {"n": 60}},
                "output_dir": tmp.path().join("g")}),
    );
    let st = Command::new(bin)
        .arg("run")
        .arg(&good)
        .env("CML_LAB_WORKERS", "2")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(EXIT_OK));
    let m = Manifest::read(&tmp.path().join("g")).unwrap();
    assert_eq!(m.experiment.as_deref(), Some("bv-suite"));
    if m.parallel {
        assert_eq!(m.workers, 2);
    }
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "json") {
            let text = std::fs::read_to_string(&p).unwrap();
            cml_lab::ExperimentConfig::from_json(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 9);
}
