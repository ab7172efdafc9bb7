//! One function per experiment kind. Each returns its report and the data
//! files to write; nothing here touches the file system.

use std::fmt::Write as _;

use cml_core::bvdiag::{check_suite, LASOTA_YORKE_C};
use cml_core::ensemble::{
    clt_statistics, degeneracy_from_run, green_kubo, llt_statistics, run_ensemble_checkpoints, VarianceEstimate,
};
use cml_core::lattice::verify_coupling_bounds;
use cml_core::observable::{center_with_report, CenterReport, Observable};
use cml_core::spectral::{
    build_ulam, lambda_curve, spectral_gap, spectral_radius_map, stationary_density, UlamOperator, DEFAULT_FD_STEP,
};
use serde_json::{json, Value};

use crate::config::{
    BvSuiteParams, CheckCouplingParams, CltParams, Experiment, ExperimentConfig, LambdaCurveParams, LltParams,
    OperatorParams, RadiusMapParams, SigmaSource, SimulateParams, SpectralParams, VarianceParams,
};
use crate::CliError;

/// Result of one experiment.
#[derive(Debug, Default)]
pub struct Outputs {
    pub report: Value,
    /// `(file name, contents)` in write order.
    pub files: Vec<(String, Vec<u8>)>,
    /// Set when the run finished but one of its checks failed.
    pub check_failure: Option<String>,
}

/// KS distances below this multiple of `1 / sqrt(n_traj)` are sampling noise
/// (the 95% quantile of the Kolmogorov distribution).
pub const KS_NOISE_95: f64 = 1.358;

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outputs, CliError> {
    let mut out = match &cfg.experiment {
        Experiment::Simulate(p) => simulate(cfg, p),
        Experiment::Variance(p) => variance(cfg, p),
        Experiment::Clt(p) => clt(cfg, p),
        Experiment::Llt(p) => llt(cfg, p),
        Experiment::Spectrum(p) => spectrum(cfg, p),
        Experiment::LambdaCurve(p) => curve(cfg, p),
        Experiment::RadiusMap(p) => radius(cfg, p),
        Experiment::CheckCoupling(p) => coupling(cfg, p),
        Experiment::BvSuite(p) => bv_suite(cfg, p),
    }?;
    if let Value::Object(m) = &mut out.report {
        m.insert("experiment".into(), json!(cfg.experiment.name()));
        m.insert("seed".into(), json!(cfg.seed));
    }
    Ok(out)
}

/// The configured observable, centered along a trajectory when asked.
fn observable(cfg: &ExperimentConfig) -> Result<(Observable, Option<CenterReport>), CliError> {
    let spec = cfg
        .observable
        .as_ref()
        .ok_or_else(|| CliError::Validation("missing observable".into()))?;
    let f = spec.build(&cfg.lattice)?;
    if spec.center {
        let (f, rep) = center_with_report(&f, &cfg.lattice, spec.center_burn, spec.center_samples, cfg.seed);
        Ok((f, Some(rep)))
    } else {
        Ok((f, None))
    }
}

/// Observable for operator work: centered on the stationary density of `op`
/// when `spectral_center` is set, so that `lambda'(0) = 0` holds exactly for
/// the finite-rank model.
fn spectral_observable(
    cfg: &ExperimentConfig,
    op: &UlamOperator,
    spectral_center: bool,
    tol: f64,
) -> Result<(Observable, Option<CenterReport>), CliError> {
    if spectral_center {
        let raw = cfg.observable.as_ref().unwrap().build(&cfg.lattice)?;
        Ok((op.center_observable(&raw, tol)?, None))
    } else {
        observable(cfg)
    }
}

fn operator(cfg: &ExperimentConfig, p: &OperatorParams) -> Result<UlamOperator, CliError> {
    Ok(build_ulam(&cfg.lattice, p.k, p.cells, p.build_spec(cfg.seed))?)
}

fn operator_json(op: &UlamOperator) -> Value {
    json!({
        "k": op.k(),
        "cells_per_site": op.cells_per_site(),
        "dim": op.dim(),
        "nnz": op.nnz(),
        "method": op.method(),
        "samples_per_cell": op.samples_per_cell(),
    })
}

fn sigma2_from(
    cfg: &ExperimentConfig,
    f: &Observable,
    src: &SigmaSource,
    n_burn: usize,
) -> (f64, Option<VarianceEstimate>) {
    match src.value {
        Some(v) => (v, None),
        None => {
            let gk = green_kubo(&cfg.lattice, f, src.lags, src.n_avg, n_burn, cfg.seed);
            (gk.sigma2, Some(gk))
        }
    }
}

fn csv(header: &str) -> String {
    let mut s = String::with_capacity(1 << 12);
    s.push_str(header);
    s.push('\n');
    s
}

fn simulate(cfg: &ExperimentConfig, p: &SimulateParams) -> Result<Outputs, CliError> {
    let (f, centering) = observable(cfg)?;
    let run = run_ensemble_checkpoints(&cfg.lattice, &f, p.n_traj, &p.n, p.n_burn, cfg.seed);
    let mut samples = Vec::new();
    run.write_csv(&mut samples)?;
    let per_n: Vec<Value> = run
        .checkpoints()
        .iter()
        .map(|&n| {
            let m = cml_core::stats::moments(run.samples_at(n).unwrap());
            json!({"n": n, "moments": m})
        })
        .collect();
    Ok(Outputs {
        report: json!({
            "n": run.n(),
            "n_traj": run.n_traj,
            "n_burn": run.n_burn,
            "centering": centering,
            "checkpoints": per_n,
        }),
        files: vec![("samples.csv".into(), samples)],
        check_failure: None,
    })
}

fn variance(cfg: &ExperimentConfig, p: &VarianceParams) -> Result<Outputs, CliError> {
    let (f, centering) = observable(cfg)?;
    let mut horizons = p.scan.clone().unwrap_or_default();
    horizons.push(p.n);
    let run = run_ensemble_checkpoints(&cfg.lattice, &f, p.n_traj, &horizons, p.n_burn, cfg.seed);
    let (ens, ens_se) = run.variance_per_step(p.n).unwrap();
    let gk = green_kubo(&cfg.lattice, &f, p.lags, p.n_avg, p.n_burn, cfg.seed);

    let mut estimates = vec![
        json!({"method": "ensemble", "sigma2": ens, "stderr": ens_se}),
        json!({"method": "green_kubo", "sigma2": gk.sigma2, "stderr": gk.sigma2_stderr}),
    ];
    let mut spectral = Value::Null;
    if let Some(op_p) = &p.spectral {
        let op = operator(cfg, op_p)?;
        let (fs, _) = spectral_observable(cfg, &op, true, op_p.tol)?;
        let curve = lambda_curve(&op, &fs, &[0.0], DEFAULT_FD_STEP, op_p.tol)?;
        estimates.push(json!({"method": "spectral", "sigma2": curve.sigma2, "stderr": 0.0}));
        spectral = json!({
            "operator": operator_json(&op),
            "h": curve.h,
            "dlambda0": curve.dlambda0,
            "d2lambda0": curve.d2lambda0,
        });
    }
    let degeneracy = p.scan.as_ref().map(|_| degeneracy_from_run(&run));

    let mut autocov = csv("k,c_k,stderr");
    for (k, (c, se)) in gk.autocov.iter().zip(&gk.autocov_stderr).enumerate() {
        writeln!(autocov, "{k},{c},{se}").unwrap();
    }
    let mut files = vec![("autocov.csv".into(), autocov.into_bytes())];
    if let Some(d) = &degeneracy {
        let mut s = csv("n,var_per_step,stderr");
        for ((n, v), se) in d.n_list.iter().zip(&d.variance_per_step).zip(&d.stderr) {
            writeln!(s, "{n},{v},{se}").unwrap();
        }
        files.push(("degeneracy.csv".into(), s.into_bytes()));
    }
    Ok(Outputs {
        report: json!({
            "n": p.n,
            "n_traj": p.n_traj,
            "centering": centering,
            "estimates": estimates,
            "green_kubo": gk,
            "spectral": spectral,
            "degeneracy": degeneracy,
        }),
        files,
        check_failure: None,
    })
}

/// Pairs `(n, 2n)` of the ladder.
fn doublings(ns: &[usize]) -> Vec<(usize, usize)> {
    ns.iter()
        .filter_map(|&n| ns.contains(&(2 * n)).then_some((n, 2 * n)))
        .collect()
}

fn clt(cfg: &ExperimentConfig, p: &CltParams) -> Result<Outputs, CliError> {
    let (f, centering) = observable(cfg)?;
    let (sigma2, gk) = sigma2_from(cfg, &f, &p.sigma2, p.n_burn);
    let run = run_ensemble_checkpoints(&cfg.lattice, &f, p.n_traj, &p.n, p.n_burn, cfg.seed);
    let reports = run
        .checkpoints()
        .iter()
        .map(|&n| clt_statistics(run.samples_at(n).unwrap(), n, sigma2))
        .collect::<Result<Vec<_>, _>>()?;
    let mut ks = csv("n,n_traj,ks,ks_critical_95,mean,variance,skewness,kurtosis");
    for r in &reports {
        let m = &r.moments;
        writeln!(
            ks,
            "{},{},{},{},{},{},{},{}",
            r.n, r.n_traj, r.ks_distance, r.ks_critical_95, m.mean, m.variance, m.skewness, m.kurtosis
        )
        .unwrap();
    }
    let noise = KS_NOISE_95 / (p.n_traj as f64).sqrt();
    let ks_at = |n: usize| reports.iter().find(|r| r.n == n).unwrap().ks_distance;
    let doubling: Vec<Value> = doublings(run.checkpoints())
        .into_iter()
        .map(|(a, b)| {
            let (ka, kb) = (ks_at(a), ks_at(b));
            json!({"n": a, "n2": b, "ks": ka, "ks2": kb, "non_increasing": kb <= ka || kb <= noise})
        })
        .collect();
    Ok(Outputs {
        report: json!({
            "sigma2": sigma2,
            "sigma2_source": gk,
            "centering": centering,
            "ks_noise_95": noise,
            "tests": reports,
            "doubling": doubling,
        }),
        files: vec![("ks.csv".into(), ks.into_bytes())],
        check_failure: None,
    })
}

fn llt(cfg: &ExperimentConfig, p: &LltParams) -> Result<Outputs, CliError> {
    let (f, centering) = observable(cfg)?;
    let (sigma2, gk) = sigma2_from(cfg, &f, &p.sigma2, p.n_burn);
    if !(sigma2 > 0.0) {
        return Err(cml_core::Error::DegenerateVariance(sigma2).into());
    }
    let sigma = sigma2.sqrt();
    let intervals: Vec<(f64, f64)> = p.intervals.iter().map(|i| (i[0], i[1])).collect();
    let run = run_ensemble_checkpoints(&cfg.lattice, &f, p.n_traj, &p.n, p.n_burn, cfg.seed);
    let reports = run
        .checkpoints()
        .iter()
        .map(|&n| llt_statistics(run.samples_at(n).unwrap(), n, sigma, &intervals))
        .collect::<Result<Vec<_>, _>>()?;
    let mut s = csv("n,a,b,length,count,rho,rho_low,rho_high,rho_stderr,gaussian_prediction");
    for r in &reports {
        for i in &r.intervals {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.n,
                i.a,
                i.b,
                i.length(),
                i.count,
                i.rho,
                i.rho_low,
                i.rho_high,
                i.rho_stderr,
                i.gaussian_prediction
            )
            .unwrap();
        }
    }
    Ok(Outputs {
        report: json!({
            "sigma2": sigma2,
            "sigma2_source": gk,
            "centering": centering,
            "tests": reports,
        }),
        files: vec![("llt.csv".into(), s.into_bytes())],
        check_failure: None,
    })
}

fn spectrum(cfg: &ExperimentConfig, p: &SpectralParams) -> Result<Outputs, CliError> {
    let op = operator(cfg, &p.operator)?;
    let pi = stationary_density(&op, p.operator.tol)?;
    let gap = spectral_gap(&op, p.operator.tol.max(1e-10))?;
    let mut s = csv("cell,coords,pi");
    for (j, v) in pi.iter().enumerate() {
        let c: Vec<String> = op.cell_coords(j).iter().map(|c| c.to_string()).collect();
        writeln!(s, "{j},{},{v}", c.join(":")).unwrap();
    }
    let mut files = vec![("stationary.csv".into(), s.into_bytes())];
    if p.export_matrix {
        let mut m = Vec::new();
        op.write_matrix_market(&mut m)?;
        files.push(("operator.mtx".into(), m));
    }
    Ok(Outputs {
        report: json!({"operator": operator_json(&op), "gap": gap}),
        files,
        check_failure: None,
    })
}

fn curve(cfg: &ExperimentConfig, p: &LambdaCurveParams) -> Result<Outputs, CliError> {
    let op = operator(cfg, &p.operator)?;
    let (f, centering) = spectral_observable(cfg, &op, p.spectral_center, p.operator.tol)?;
    let grid = p.t_grid.values()?;
    let h = p.h.or(p.t_grid.spacing()).unwrap_or(DEFAULT_FD_STEP);
    let c = lambda_curve(&op, &f, &grid, h, p.operator.tol)?;
    let mut s = Vec::new();
    c.write_csv(&mut s)?;
    Ok(Outputs {
        report: json!({
            "operator": operator_json(&op),
            "centering": centering,
            "offset": f.offset(),
            "h": c.h,
            "dlambda0": c.dlambda0,
            "d2lambda0": c.d2lambda0,
            "sigma2": c.sigma2,
            "min_overlap": c.overlap.iter().copied().fold(f64::INFINITY, f64::min),
            "max_abs_off_zero": max_off_zero(&c.t, &c.lambda.iter().map(|l| l.norm()).collect::<Vec<_>>()),
        }),
        files: vec![("eigencurve.csv".into(), s)],
        check_failure: None,
    })
}

fn max_off_zero(t: &[f64], v: &[f64]) -> Option<f64> {
    t.iter()
        .zip(v)
        .filter(|(t, _)| **t != 0.0)
        .map(|(_, v)| *v)
        .reduce(f64::max)
}

fn radius(cfg: &ExperimentConfig, p: &RadiusMapParams) -> Result<Outputs, CliError> {
    let op = operator(cfg, &p.operator)?;
    let (f, centering) = spectral_observable(cfg, &op, p.spectral_center, p.operator.tol)?;
    let grid = p.t_grid.values()?;
    let est = spectral_radius_map(&op, &f, &grid, p.n_power, cfg.seed)?;
    let mut s = csv("t,radius,start0,start1,start2");
    for e in &est {
        let starts: Vec<String> = e.per_start.iter().map(|x| x.to_string()).collect();
        writeln!(s, "{},{},{}", e.t, e.radius, starts.join(",")).unwrap();
    }
    let t: Vec<f64> = est.iter().map(|e| e.t).collect();
    let r: Vec<f64> = est.iter().map(|e| e.radius).collect();
    let max_r = max_off_zero(&t, &r);
    Ok(Outputs {
        report: json!({
            "operator": operator_json(&op),
            "centering": centering,
            "n_power": p.n_power,
            "max_radius_off_zero": max_r,
            "min_gap_off_zero": max_r.map(|r| 1.0 - r),
            "estimates": est,
        }),
        files: vec![("radius.csv".into(), s.into_bytes())],
        check_failure: None,
    })
}

fn coupling(cfg: &ExperimentConfig, p: &CheckCouplingParams) -> Result<Outputs, CliError> {
    let rep = verify_coupling_bounds(&cfg.lattice, p.n_samples, cfg.seed);
    let mut s = csv("quantity,value,bound,ok");
    for (q, v, ok) in [
        ("sup_a", rep.sup_a, rep.a_ok),
        ("sup_da", rep.sup_da, rep.da_ok),
        ("sup_d2a", rep.sup_d2a, rep.d2a_ok),
    ] {
        writeln!(s, "{q},{v},{},{ok}", rep.bound).unwrap();
    }
    writeln!(s, "max_nonlocal,{},0,{}", rep.max_nonlocal, rep.locality_ok).unwrap();
    let check_failure = (!rep.all_ok()).then(|| "coupling bounds violated".to_string());
    Ok(Outputs {
        report: json!({"all_ok": rep.all_ok(), "bounds": rep}),
        files: vec![("bounds.csv".into(), s.into_bytes())],
        check_failure,
    })
}

fn bv_suite(cfg: &ExperimentConfig, p: &BvSuiteParams) -> Result<Outputs, CliError> {
    let rep = check_suite(p.n, cfg.seed, p.c.unwrap_or(LASOTA_YORKE_C));
    let mut s = csv("check,violations");
    for (q, v) in [
        ("abs", rep.abs_violations),
        ("two_norm", rep.two_norm_violations),
        ("lipschitz", rep.lipschitz_violations),
        ("seminorm", rep.seminorm_violations),
        ("lasota_yorke", rep.lasota_yorke_violations),
    ] {
        writeln!(s, "{q},{v}").unwrap();
    }
    let total = rep.total_violations();
    Ok(Outputs {
        report: json!({"total_violations": total, "suite": rep}),
        files: vec![("bv.csv".into(), s.into_bytes())],
        check_failure: (total > 0).then(|| format!("{total} inequality violations")),
    })
}
