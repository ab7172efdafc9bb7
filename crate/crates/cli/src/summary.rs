//! Text summary of an output directory.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::config::{ExperimentConfig, Thresholds};
use crate::manifest::Manifest;
use crate::CliError;

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

/// Builds the summary text; fails when `dir` has no manifest.
pub fn summarize(dir: &Path) -> Result<String, CliError> {
    let manifest = Manifest::read(dir)?;
    let mut s = String::new();
    let w = &mut s;
    writeln!(w, "{} {}", manifest.tool, manifest.version).unwrap();
    writeln!(
        w,
        "experiment: {}  seed: {}  workers: {}  wall time: {:.2}s",
        manifest.experiment.as_deref().unwrap_or("?"),
        manifest.seed.map_or("?".into(), |s| s.to_string()),
        manifest.workers,
        manifest.wall_time_s
    )
    .unwrap();
    writeln!(w, "status: {} (exit {})", manifest.status, manifest.exit_code).unwrap();
    if let Some(e) = &manifest.error {
        writeln!(w, "error: {e}").unwrap();
    }
    let stale = manifest.stale_files(dir);
    writeln!(
        w,
        "files: {} listed, {} changed or missing",
        manifest.files.len(),
        stale.len()
    )
    .unwrap();
    for f in &stale {
        writeln!(w, "  changed: {f}").unwrap();
    }

    let Ok(report) = std::fs::read_to_string(dir.join("report.json")) else {
        return Ok(s);
    };
    let report: Value = serde_json::from_str(&report)?;
    let thresholds = std::fs::read_to_string(dir.join("config.json"))
        .ok()
        .and_then(|t| ExperimentConfig::from_json(&t).ok())
        .map(|c| c.thresholds)
        .unwrap_or_default();
    let kind = report["experiment"].as_str().unwrap_or("");
    match kind {
        "variance" => variance(w, &report, &thresholds),
        "clt" => clt(w, &report, &thresholds),
        "llt" => llt(w, &report, &thresholds),
        "spectrum" => {
            let gap = num(&report["gap"]["gap"]);
            write!(
                w,
                "spectral gap: {gap:.6}  |lambda_2|: {:.6}",
                num(&report["gap"]["lambda2_modulus"])
            )
            .unwrap();
            match thresholds.gap_min {
                Some(g) => writeln!(w, "  [{} vs >= {g}]", verdict(gap >= g)).unwrap(),
                None => writeln!(w).unwrap(),
            }
        }
        "lambda-curve" => {
            writeln!(
                w,
                "-lambda''(0) = {:.6}  min overlap: {:.4}  max |lambda(t)|, t != 0: {:.6}",
                num(&report["sigma2"]),
                num(&report["min_overlap"]),
                num(&report["max_abs_off_zero"])
            )
            .unwrap();
        }
        "radius-map" => {
            let r = num(&report["max_radius_off_zero"]);
            write!(w, "max radius (t != 0): {r:.6}  min gap: {:.6}", 1.0 - r).unwrap();
            match thresholds.radius_max {
                Some(m) => writeln!(w, "  [{} vs < {m}]", verdict(r < m)).unwrap(),
                None => writeln!(w).unwrap(),
            }
        }
        "check-coupling" => {
            let b = &report["bounds"];
            writeln!(
                w,
                "sup|A| {:.3e}  sup|DA| {:.3e}  sup|D2A| {:.3e}  bound {:.3e}  nonlocal {:.3e}  [{}]",
                num(&b["sup_a"]),
                num(&b["sup_da"]),
                num(&b["sup_d2a"]),
                num(&b["bound"]),
                num(&b["max_nonlocal"]),
                verdict(report["all_ok"].as_bool() == Some(true))
            )
            .unwrap();
        }
        "bv-suite" => {
            let total = report["total_violations"].as_u64().unwrap_or(u64::MAX);
            writeln!(
                w,
                "{} densities, {total} violations, Lasota-Yorke max ratio {:.4} (C = {})  [{}]",
                report["suite"]["n"],
                num(&report["suite"]["lasota_yorke_max_ratio"]),
                num(&report["suite"]["lasota_yorke_c"]),
                verdict(total == 0)
            )
            .unwrap();
        }
        "simulate" => {
            for c in report["checkpoints"].as_array().into_iter().flatten() {
                writeln!(
                    w,
                    "n = {}: mean {:.6}  var {:.6}",
                    c["n"],
                    num(&c["moments"]["mean"]),
                    num(&c["moments"]["variance"])
                )
                .unwrap();
            }
        }
        _ => {}
    }
    Ok(s)
}

fn variance(w: &mut String, report: &Value, th: &Thresholds) {
    let est: Vec<(String, f64, f64)> = report["estimates"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|e| {
            (
                e["method"].as_str().unwrap_or("?").to_string(),
                num(&e["sigma2"]),
                num(&e["stderr"]),
            )
        })
        .collect();
    writeln!(w, "{:<12} {:>14} {:>12}", "sigma2", "estimate", "stderr").unwrap();
    for (m, v, se) in &est {
        writeln!(w, "{m:<12} {v:>14.6} {se:>12.2e}").unwrap();
    }
    if let Some(rel) = th.variance_rel_tol {
        for i in 0..est.len() {
            for j in i + 1..est.len() {
                let (a, b) = (&est[i], &est[j]);
                let tol = rel * 0.5 * (a.1 + b.1).abs() + 3.0 * a.2.hypot(b.2);
                writeln!(
                    w,
                    "{} vs {}: |diff| {:.2e} <= {:.2e}  [{}]",
                    a.0,
                    b.0,
                    (a.1 - b.1).abs(),
                    tol,
                    verdict((a.1 - b.1).abs() <= tol)
                )
                .unwrap();
            }
        }
    }
    if let Some(d) = report.get("degeneracy").filter(|d| !d.is_null()) {
        writeln!(w, "degeneracy slope: {}  degenerate: {}", d["slope"], d["degenerate"]).unwrap();
    }
}

fn clt(w: &mut String, report: &Value, th: &Thresholds) {
    writeln!(w, "sigma2 = {:.6}", num(&report["sigma2"])).unwrap();
    for t in report["tests"].as_array().into_iter().flatten() {
        let ks = num(&t["ks_distance"]);
        write!(
            w,
            "n = {:>6}  KS {:.5}  (95% critical {:.5})",
            t["n"],
            ks,
            num(&t["ks_critical_95"])
        )
        .unwrap();
        match th.ks_max {
            Some(m) => writeln!(w, "  [{} vs <= {m}]", verdict(ks <= m)).unwrap(),
            None => writeln!(w).unwrap(),
        }
    }
    for d in report["doubling"].as_array().into_iter().flatten() {
        writeln!(
            w,
            "n {} -> {}: KS {:.5} -> {:.5}  [{}]",
            d["n"],
            d["n2"],
            num(&d["ks"]),
            num(&d["ks2"]),
            verdict(d["non_increasing"].as_bool() == Some(true))
        )
        .unwrap();
    }
}

fn llt(w: &mut String, report: &Value, th: &Thresholds) {
    writeln!(w, "sigma2 = {:.6}", num(&report["sigma2"])).unwrap();
    for t in report["tests"].as_array().into_iter().flatten() {
        writeln!(w, "n = {}", t["n"]).unwrap();
        for i in t["intervals"].as_array().into_iter().flatten() {
            let (a, b, rho) = (num(&i["a"]), num(&i["b"]), num(&i["rho"]));
            let len = (b - a).max(0.0);
            write!(
                w,
                "  [{a}, {b}]  rho {rho:.5}  |I| {len:.5}  gaussian {:.5}",
                num(&i["gaussian_prediction"])
            )
            .unwrap();
            match th.llt_rel_tol {
                Some(r) => writeln!(w, "  [{}]", verdict((rho - len).abs() <= r * len)).unwrap(),
                None => writeln!(w).unwrap(),
            }
        }
    }
}
