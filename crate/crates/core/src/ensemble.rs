//! Ensembles of Birkhoff sums and the statistics built on them: Green–Kubo
//! variance, central and local limit theorem checks, coboundary detection.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::lattice::{LatticeConfig, LatticeState};
use crate::observable::Observable;
use crate::rng::{self, Domain};
use crate::stats::{self, LinearFit, Moments};

pub const DEFAULT_BURN_IN: usize = 1000;
pub const DEFAULT_GK_LAGS: usize = 50;

/// Birkhoff sums `S_n f` of independent trajectories.
///
/// Trajectory `i` starts from a product-Lebesgue point drawn from the random
/// stream `(master_seed, i)`, so the samples do not depend on the number of
/// workers. Partial sums are kept at every checkpoint horizon.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub cfg: LatticeConfig,
    pub f: Observable,
    pub n_traj: usize,
    pub n_burn: usize,
    pub master_seed: u64,
    checkpoints: Vec<usize>,
    /// `partial[c][i]` is `S_{checkpoints[c]} f` of trajectory `i`.
    partial: Vec<Vec<f64>>,
}

impl EnsembleRun {
    /// Largest horizon `n`.
    pub fn n(&self) -> usize {
        *self.checkpoints.last().unwrap()
    }

    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    /// `S_n f` per trajectory at the final horizon.
    pub fn samples(&self) -> &[f64] {
        self.partial.last().unwrap()
    }

    /// Samples at checkpoint horizon `n`, if it was recorded.
    pub fn samples_at(&self, n: usize) -> Option<&[f64]> {
        self.checkpoints
            .iter()
            .position(|&c| c == n)
            .map(|i| self.partial[i].as_slice())
    }

    /// The run restricted to its first `n_traj` trajectories (which is itself
    /// a valid run with the same seed).
    pub fn truncated(&self, n_traj: usize) -> EnsembleRun {
        let n_traj = n_traj.min(self.n_traj);
        EnsembleRun {
            n_traj,
            partial: self.partial.iter().map(|p| p[..n_traj].to_vec()).collect(),
            ..self.clone()
        }
    }

    /// `Var(S_n f) / n` at horizon `n` with its standard error.
    pub fn variance_per_step(&self, n: usize) -> Option<(f64, f64)> {
        let xs = self.samples_at(n)?;
        let m = stats::moments(xs);
        let nt = xs.len() as f64;
        let se = m.variance * (2.0 / (nt - 1.0) + m.kurtosis / nt).max(0.0).sqrt();
        Some((m.variance / n as f64, se / n as f64))
    }

    /// CSV with one row per trajectory: `index,s_n`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "index,s_n")?;
        for (i, s) in self.samples().iter().enumerate() {
            writeln!(w, "{i},{s}")?;
        }
        Ok(())
    }
}

fn trajectory(
    cfg: &LatticeConfig,
    f: &Observable,
    checkpoints: &[usize],
    n_burn: usize,
    seed: u64,
    index: usize,
) -> Vec<f64> {
    let mut rng = rng::stream(seed, Domain::Trajectory, index as u64);
    let mut x = LatticeState::random(cfg.n_sites(), &mut rng).into_sites();
    let mut scratch = vec![0.0; x.len()];
    for _ in 0..n_burn {
        cfg.step_in_place(&mut x, &mut scratch);
    }
    let n = *checkpoints.last().unwrap();
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = 0;
    let mut s = 0.0;
    for k in 0..n {
        s += f.eval(&x);
        if k + 1 == checkpoints[next] {
            out.push(s);
            next += 1;
        }
        if k + 1 < n {
            cfg.step_in_place(&mut x, &mut scratch);
        }
    }
    out
}

pub fn run_ensemble(
    cfg: &LatticeConfig,
    f: &Observable,
    n_traj: usize,
    n: usize,
    n_burn: usize,
    master_seed: u64,
) -> EnsembleRun {
    run_ensemble_checkpoints(cfg, f, n_traj, &[n], n_burn, master_seed)
}

/// Like [`run_ensemble`], recording `S_n f` at every horizon in `n_list`.
pub fn run_ensemble_checkpoints(
    cfg: &LatticeConfig,
    f: &Observable,
    n_traj: usize,
    n_list: &[usize],
    n_burn: usize,
    master_seed: u64,
) -> EnsembleRun {
    let mut checkpoints: Vec<usize> = n_list.iter().copied().filter(|&n| n > 0).collect();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    assert!(!checkpoints.is_empty(), "at least one positive horizon is required");
    assert!(n_traj > 0, "at least one trajectory is required");

    let rows = exec::map_range(n_traj, |i| trajectory(cfg, f, &checkpoints, n_burn, master_seed, i));
    let mut partial = vec![Vec::with_capacity(n_traj); checkpoints.len()];
    for row in rows {
        for (c, v) in row.into_iter().enumerate() {
            partial[c].push(v);
        }
    }
    EnsembleRun {
        cfg: cfg.clone(),
        f: f.clone(),
        n_traj,
        n_burn,
        master_seed,
        checkpoints,
        partial,
    }
}

/// Truncated Green–Kubo sum with block-jackknife errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceEstimate {
    /// `C_0 + 2 sum_{k=1}^K C_k`.
    pub sigma2: f64,
    pub sigma2_stderr: f64,
    /// `C_0, ..., C_K`.
    pub autocov: Vec<f64>,
    pub autocov_stderr: Vec<f64>,
    pub lags: usize,
    pub n_avg: usize,
    pub blocks: usize,
    /// `|C_K| / C_0`.
    pub decay_ratio: f64,
    /// Set when `decay_ratio > 0.01`: the truncation is too short.
    pub truncation_warning: bool,
}

const JACKKNIFE_BLOCKS: usize = 100;

/// Estimates `C_k = ∫ f · f∘T^k dμ_eps` for `k <= lags` by time averages along
/// one trajectory of length `n_avg` (after `n_burn` steps).
pub fn green_kubo(
    cfg: &LatticeConfig,
    f: &Observable,
    lags: usize,
    n_avg: usize,
    n_burn: usize,
    seed: u64,
) -> VarianceEstimate {
    let mut rng = rng::stream(seed, Domain::LongRun, 0);
    let mut x = LatticeState::random(cfg.n_sites(), &mut rng).into_sites();
    let mut scratch = vec![0.0; x.len()];
    for _ in 0..n_burn {
        cfg.step_in_place(&mut x, &mut scratch);
    }

    let n_avg = n_avg.max(lags + 1);
    let blocks = JACKKNIFE_BLOCKS.min(n_avg / (lags + 1)).max(2);
    let block_len = n_avg.div_ceil(blocks);
    let width = lags + 1;
    let mut sums = vec![0.0; blocks * width];
    let mut counts = vec![0usize; blocks * width];
    // ring[i % width] holds f(T^i x)
    let mut ring = vec![0.0; width];
    for i in 0..n_avg {
        let v = f.eval(&x);
        ring[i % width] = v;
        let b = i / block_len;
        let row = &mut sums[b * width..(b + 1) * width];
        let crow = &mut counts[b * width..(b + 1) * width];
        for k in 0..=lags.min(i) {
            row[k] += v * ring[(i - k) % width];
            crow[k] += 1;
        }
        if i + 1 < n_avg {
            cfg.step_in_place(&mut x, &mut scratch);
        }
    }

    let totals: Vec<f64> = (0..width)
        .map(|k| (0..blocks).map(|b| sums[b * width + k]).sum())
        .collect();
    let total_counts: Vec<usize> = (0..width)
        .map(|k| (0..blocks).map(|b| counts[b * width + k]).sum())
        .collect();
    let autocov: Vec<f64> = (0..width).map(|k| totals[k] / total_counts[k] as f64).collect();
    let gk = |c: &[f64]| c[0] + 2.0 * c[1..].iter().sum::<f64>();
    let sigma2 = gk(&autocov);

    let leave_out: Vec<Vec<f64>> = (0..blocks)
        .map(|b| {
            (0..width)
                .map(|k| (totals[k] - sums[b * width + k]) / (total_counts[k] - counts[b * width + k]) as f64)
                .collect()
        })
        .collect();
    let jk_se = |vals: &[f64]| {
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let bf = vals.len() as f64;
        ((bf - 1.0) / bf * vals.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt()
    };
    let autocov_stderr = (0..width)
        .map(|k| jk_se(&leave_out.iter().map(|c| c[k]).collect::<Vec<_>>()))
        .collect();
    let sigma2_stderr = jk_se(&leave_out.iter().map(|c| gk(c)).collect::<Vec<_>>());

    let decay_ratio = if autocov[0] > 0.0 {
        autocov[lags].abs() / autocov[0]
    } else {
        0.0
    };
    VarianceEstimate {
        sigma2,
        sigma2_stderr,
        autocov,
        autocov_stderr,
        lags,
        n_avg,
        blocks,
        decay_ratio,
        truncation_warning: decay_ratio > 0.01,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CltReport {
    pub n: usize,
    pub n_traj: usize,
    pub sigma2: f64,
    /// KS distance of `S_n f / sqrt(n sigma2)` to the standard normal.
    pub ks_distance: f64,
    /// 95% critical value of the KS statistic for this sample size.
    pub ks_critical_95: f64,
    /// Moments of the normalized sums.
    pub moments: Moments,
}

/// CLT statistics of raw Birkhoff sums at horizon `n`.
pub fn clt_statistics(samples: &[f64], n: usize, sigma2: f64) -> Result<CltReport> {
    if !(sigma2 > 0.0) {
        return Err(Error::DegenerateVariance(sigma2));
    }
    let scale = 1.0 / (n as f64 * sigma2).sqrt();
    let z: Vec<f64> = samples.iter().map(|s| s * scale).collect();
    Ok(CltReport {
        n,
        n_traj: z.len(),
        sigma2,
        ks_distance: stats::ks_distance(&z, stats::normal_cdf),
        ks_critical_95: stats::ks_critical_95(z.len()),
        moments: stats::moments(&z),
    })
}

pub fn clt_test(run: &EnsembleRun, sigma2: f64) -> Result<CltReport> {
    clt_statistics(run.samples(), run.n(), sigma2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalRatio {
    pub a: f64,
    pub b: f64,
    pub count: usize,
    /// `sigma sqrt(2 pi n) * fraction in [a, b]`; tends to `b - a`.
    pub rho: f64,
    /// 95% Wilson interval for `rho`.
    pub rho_low: f64,
    pub rho_high: f64,
    /// Standard error of `rho` from the binomial count.
    pub rho_stderr: f64,
    /// `sqrt(2 pi) sigma sqrt(n) [Phi(b) - Phi(a)]` with `Phi` the `N(0, sigma^2 n)` CDF.
    pub gaussian_prediction: f64,
    pub expected_count: f64,
    /// Expected count below 100.
    pub low_count_warning: bool,
}

impl IntervalRatio {
    pub fn length(&self) -> f64 {
        (self.b - self.a).max(0.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LltReport {
    pub n: usize,
    pub n_traj: usize,
    pub sigma: f64,
    pub intervals: Vec<IntervalRatio>,
}

pub fn llt_statistics(samples: &[f64], n: usize, sigma: f64, intervals: &[(f64, f64)]) -> Result<LltReport> {
    if !(sigma > 0.0) {
        return Err(Error::DegenerateVariance(sigma));
    }
    let n_traj = samples.len();
    let nt = n_traj as f64;
    let scale = sigma * (std::f64::consts::TAU * n as f64).sqrt();
    let var = sigma * sigma * n as f64;
    let intervals = intervals
        .iter()
        .map(|&(a, b)| {
            let count = if b > a {
                samples.iter().filter(|&&s| a <= s && s <= b).count()
            } else {
                0
            };
            let p = count as f64 / nt;
            let (lo, hi) = stats::wilson_interval(count, n_traj, 0.95);
            let prob = if b > a {
                stats::normal_cdf_var(b, var) - stats::normal_cdf_var(a, var)
            } else {
                0.0
            };
            let expected_count = prob * nt;
            IntervalRatio {
                a,
                b,
                count,
                rho: scale * p,
                rho_low: scale * lo,
                rho_high: scale * hi,
                rho_stderr: scale * (p * (1.0 - p) / nt).sqrt(),
                gaussian_prediction: scale * prob,
                expected_count,
                low_count_warning: expected_count < 100.0,
            }
        })
        .collect();
    Ok(LltReport {
        n,
        n_traj,
        sigma,
        intervals,
    })
}

pub fn llt_test(run: &EnsembleRun, sigma: f64, intervals: &[(f64, f64)]) -> Result<LltReport> {
    llt_statistics(run.samples(), run.n(), sigma, intervals)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegeneracyReport {
    pub n_list: Vec<usize>,
    /// `Var(S_n f) / n` per horizon.
    pub variance_per_step: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Log-log slope of `Var(S_n f) / n` against `n`; `None` when every
    /// variance vanishes.
    pub slope: Option<f64>,
    pub fit: Option<LinearFit>,
    /// Slope `<= -0.8`, or identically zero variance.
    pub degenerate: bool,
}

/// `Var(S_n f) / n` along an increasing list of horizons.
pub fn degeneracy_scan(
    cfg: &LatticeConfig,
    f: &Observable,
    n_list: &[usize],
    n_traj: usize,
    n_burn: usize,
    seed: u64,
) -> DegeneracyReport {
    let run = run_ensemble_checkpoints(cfg, f, n_traj, n_list, n_burn, seed);
    degeneracy_from_run(&run)
}

pub fn degeneracy_from_run(run: &EnsembleRun) -> DegeneracyReport {
    let n_list = run.checkpoints().to_vec();
    let (variance_per_step, stderr): (Vec<f64>, Vec<f64>) =
        n_list.iter().map(|&n| run.variance_per_step(n).unwrap()).unzip();
    let positive: Vec<(f64, f64)> = n_list
        .iter()
        .zip(&variance_per_step)
        .filter(|(_, &v)| v > 1e-300)
        .map(|(&n, &v)| ((n as f64).ln(), v.ln()))
        .collect();
    let fit = (positive.len() >= 2).then(|| {
        let (x, y): (Vec<f64>, Vec<f64>) = positive.iter().copied().unzip();
        stats::linear_fit(&x, &y)
    });
    let slope = fit.map(|f| f.slope);
    let all_zero = variance_per_step.iter().all(|&v| v <= 1e-24);
    DegeneracyReport {
        n_list,
        variance_per_step,
        stderr,
        slope,
        fit,
        degenerate: all_zero || slope.is_some_and(|s| s <= -0.8),
    }
}
