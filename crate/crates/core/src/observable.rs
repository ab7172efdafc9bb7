//! Lipschitz observables that depend on finitely many lattice sites.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lattice::{Coupling, LatticeConfig, LatticeState};
use crate::rng::{self, Domain};

#[derive(Debug, Clone)]
pub enum ObservableKind {
    Constant(f64),
    /// `x_p`
    Coordinate(usize),
    /// `cos(2π x_p)`
    CosCoordinate(usize),
    /// `x_p * x_q`
    Product(usize, usize),
    /// `u - u ∘ T_eps`
    Coboundary {
        inner: Box<ObservableKind>,
        cfg: Arc<LatticeConfig>,
    },
}

impl ObservableKind {
    fn eval_with(&self, get: &dyn Fn(usize) -> f64) -> f64 {
        match self {
            ObservableKind::Constant(c) => *c,
            ObservableKind::Coordinate(p) => get(*p),
            ObservableKind::CosCoordinate(p) => (std::f64::consts::TAU * get(*p)).cos(),
            ObservableKind::Product(p, q) => get(*p) * get(*q),
            ObservableKind::Coboundary { inner, cfg } => {
                let image = |q: usize| cfg.site_image(q, get);
                inner.eval_with(get) - inner.eval_with(&image)
            }
        }
    }

    #[inline]
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ObservableKind::Constant(c) => *c,
            ObservableKind::Coordinate(p) => x[*p],
            ObservableKind::CosCoordinate(p) => (std::f64::consts::TAU * x[*p]).cos(),
            ObservableKind::Product(p, q) => x[*p] * x[*q],
            ObservableKind::Coboundary { .. } => self.eval_with(&|q| x[q]),
        }
    }

    /// Sites read by the observable with their Lipschitz constants.
    fn lipschitz(&self) -> Vec<(usize, f64)> {
        match self {
            ObservableKind::Constant(_) => vec![],
            ObservableKind::Coordinate(p) => vec![(*p, 1.0)],
            ObservableKind::CosCoordinate(p) => vec![(*p, std::f64::consts::TAU)],
            ObservableKind::Product(p, q) if p == q => vec![(*p, 2.0)],
            ObservableKind::Product(p, q) => vec![(*p, 1.0), (*q, 1.0)],
            ObservableKind::Coboundary { inner, cfg } => {
                let slope = max_slope(cfg);
                let torus = cfg.torus();
                let eps = cfg.eps();
                let mut acc: Vec<(usize, f64)> = inner.lipschitz();
                for (q, lq) in inner.lipschitz() {
                    // Lip_p([T x]_q)
                    for p in torus.ball(q, cfg.range()) {
                        let w = match cfg.coupling() {
                            Coupling::Diffusive if p == q => (1.0 - eps) * slope,
                            Coupling::Diffusive => eps / (2 * torus.dim()) as f64 * slope,
                            Coupling::Custom(_) => (1.0 + 2.0 * eps) * slope,
                        };
                        acc.push((p, lq * w));
                    }
                }
                acc.sort_by_key(|e| e.0);
                let mut merged: Vec<(usize, f64)> = Vec::new();
                for (p, l) in acc {
                    match merged.last_mut() {
                        Some(last) if last.0 == p => last.1 += l,
                        _ => merged.push((p, l)),
                    }
                }
                merged
            }
        }
    }
}

fn max_slope(cfg: &LatticeConfig) -> f64 {
    let map = cfg.map();
    let z = map.singularities();
    let mut s: f64 = 0.0;
    for (j, br) in map.branches().iter().enumerate() {
        for i in 0..=64 {
            let x = z[j] + (z[j + 1] - z[j]) * i as f64 / 64.0;
            s = s.max(br.derivative(x).abs());
        }
    }
    s
}

/// `f - c` for a Lipschitz `f` of finitely many sites and a recorded offset `c`.
#[derive(Debug, Clone)]
pub struct Observable {
    kind: ObservableKind,
    offset: f64,
    support: Vec<usize>,
    lipschitz: Vec<f64>,
}

impl Observable {
    pub fn new(kind: ObservableKind) -> Self {
        let lip = kind.lipschitz();
        Observable {
            kind,
            offset: 0.0,
            support: lip.iter().map(|e| e.0).collect(),
            lipschitz: lip.iter().map(|e| e.1).collect(),
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn constant(c: f64) -> Self {
        Self::new(ObservableKind::Constant(c))
    }

    pub fn coordinate(cfg: &LatticeConfig, site: &[i64]) -> Self {
        Self::new(ObservableKind::Coordinate(cfg.torus().index(site)))
    }

    pub fn cos_coordinate(cfg: &LatticeConfig, site: &[i64]) -> Self {
        Self::new(ObservableKind::CosCoordinate(cfg.torus().index(site)))
    }

    pub fn product(cfg: &LatticeConfig, a: &[i64], b: &[i64]) -> Self {
        let t = cfg.torus();
        Self::new(ObservableKind::Product(t.index(a), t.index(b)))
    }

    /// `u - u ∘ T_eps` (the offset of `u` is dropped; it cancels).
    pub fn coboundary(u: &Observable, cfg: &LatticeConfig) -> Self {
        Self::new(ObservableKind::Coboundary {
            inner: Box::new(u.kind.clone()),
            cfg: Arc::new(cfg.clone()),
        })
    }

    pub fn kind(&self) -> &ObservableKind {
        &self.kind
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn with_offset(mut self, c: f64) -> Self {
        self.offset = c;
        self
    }

    /// Site indices the observable reads.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// `Lip_p(f)` for each site of [`support`](Self::support).
    pub fn lipschitz(&self) -> &[f64] {
        &self.lipschitz
    }

    /// True if the observable is a constant function.
    pub fn is_constant(&self) -> bool {
        self.support.is_empty()
    }

    #[inline]
    pub fn eval(&self, sites: &[f64]) -> f64 {
        self.kind.eval(sites) - self.offset
    }

    /// Evaluate reading sites through `get`.
    pub fn eval_with(&self, get: &dyn Fn(usize) -> f64) -> f64 {
        self.kind.eval_with(get) - self.offset
    }

    pub fn eval_state(&self, s: &LatticeState) -> f64 {
        self.eval(s.sites())
    }

    /// Randomized check that sites outside the support do not influence the value.
    pub fn probe_support(&self, n_sites: usize, n_probe: usize, seed: u64) -> bool {
        (0..n_probe).all(|i| {
            let mut rng = rng::stream(seed, Domain::Probe, i as u64);
            let x: Vec<f64> = (0..n_sites).map(|_| rng.random()).collect();
            let mut y = x.clone();
            for (p, v) in y.iter_mut().enumerate() {
                if !self.support.contains(&p) {
                    *v = rng.random();
                }
            }
            self.eval(&x) == self.eval(&y)
        })
    }

    /// Randomized check of `|f(x) - f(y)| <= sum_p Lip_p |x_p - y_p|`.
    pub fn probe_lipschitz(&self, n_sites: usize, n_probe: usize, seed: u64) -> bool {
        (0..n_probe).all(|i| {
            let mut rng = rng::stream(seed, Domain::Probe, i as u64);
            let x: Vec<f64> = (0..n_sites).map(|_| rng.random()).collect();
            let scale: f64 = rng.random::<f64>().powi(4);
            let y: Vec<f64> = x
                .iter()
                .map(|&v| (v + scale * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0))
                .collect();
            let bound: f64 = self
                .support
                .iter()
                .zip(&self.lipschitz)
                .map(|(&p, &l)| l * (x[p] - y[p]).abs())
                .sum();
            (self.eval(&x) - self.eval(&y)).abs() <= bound * (1.0 + 1e-9) + 1e-12
        })
    }
}

/// Time-average estimate of `∫ f dμ_eps`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CenterReport {
    pub offset: f64,
    /// Batch-means standard error of the offset.
    pub stderr: f64,
    pub n_burn: usize,
    pub n_est: usize,
}

const CENTER_BATCHES: usize = 50;

/// Sets the offset of `f` to its time average along one trajectory started
/// from a product-Lebesgue random point, after `n_burn` discarded steps.
pub fn center(f: &Observable, cfg: &LatticeConfig, n_burn: usize, n_est: usize, seed: u64) -> Observable {
    center_with_report(f, cfg, n_burn, n_est, seed).0
}

pub fn center_with_report(
    f: &Observable,
    cfg: &LatticeConfig,
    n_burn: usize,
    n_est: usize,
    seed: u64,
) -> (Observable, CenterReport) {
    let n_est = n_est.max(1);
    let raw = f.clone().with_offset(0.0);
    let mut rng = rng::stream(seed, Domain::Centering, 0);
    let mut x = LatticeState::random(cfg.n_sites(), &mut rng).into_sites();
    let mut scratch = vec![0.0; x.len()];
    for _ in 0..n_burn {
        cfg.step_in_place(&mut x, &mut scratch);
    }
    let batches = CENTER_BATCHES.min(n_est);
    let per_batch = n_est / batches;
    let mut batch_means = Vec::with_capacity(batches);
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..batches {
        let len = if b + 1 == batches {
            n_est - per_batch * (batches - 1)
        } else {
            per_batch
        };
        let mut s = 0.0;
        for _ in 0..len {
            s += raw.eval(&x);
            cfg.step_in_place(&mut x, &mut scratch);
        }
        total += s;
        count += len;
        batch_means.push(s / len as f64);
    }
    let mean = total / count as f64;
    let stderr = if batches > 1 {
        let var = batch_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
        (var / batches as f64).sqrt()
    } else {
        f64::NAN
    };
    (
        raw.with_offset(mean),
        CenterReport {
            offset: mean,
            stderr,
            n_burn,
            n_est,
        },
    )
}

/// `S_n f(s0) = sum_{k<n} f(T^k s0)`.
pub fn birkhoff_sum(f: &Observable, cfg: &LatticeConfig, s0: &LatticeState, n: usize) -> f64 {
    let mut x = s0.sites().to_vec();
    let mut scratch = vec![0.0; x.len()];
    let mut s = 0.0;
    for k in 0..n {
        s += f.eval(&x);
        if k + 1 < n {
            cfg.step_in_place(&mut x, &mut scratch);
        }
    }
    s
}
