//! Coupled map lattice on the finite torus `(Z/LZ)^d`.
//!
//! One time step is `T_eps = Phi_eps ∘ T_0`: every site is first mapped by the
//! single-site map, then the coupling mixes each site with the sites within its
//! declared range.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::sitemap::SiteMap;

pub const DEFAULT_EPS_MAX: f64 = 0.05;

/// Index arithmetic on `(Z/LZ)^d`. Sites are stored with axis 0 fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Torus {
    d: usize,
    l: usize,
    n: usize,
    neighbors: Vec<usize>,
}

impl Torus {
    pub fn new(d: usize, l: usize) -> Self {
        let n = l.pow(d as u32);
        let mut neighbors = Vec::with_capacity(n * 2 * d);
        let mut coords = vec![0usize; d];
        for i in 0..n {
            Self::fill_coords(l, i, &mut coords);
            for axis in 0..d {
                for delta in [l - 1, 1] {
                    let mut c = coords.clone();
                    c[axis] = (c[axis] + delta) % l;
                    neighbors.push(Self::linear(l, &c));
                }
            }
        }
        Torus { d, l, n, neighbors }
    }

    fn fill_coords(l: usize, mut i: usize, out: &mut [usize]) {
        for c in out.iter_mut() {
            *c = i % l;
            i /= l;
        }
    }

    fn linear(l: usize, coords: &[usize]) -> usize {
        coords.iter().rev().fold(0, |acc, &c| acc * l + c)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn side(&self) -> usize {
        self.l
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Linear index of the (wrapped) coordinate vector.
    pub fn index(&self, coords: &[i64]) -> usize {
        assert_eq!(coords.len(), self.d, "coordinate dimension mismatch");
        let l = self.l as i64;
        let c: Vec<usize> = coords.iter().map(|&x| x.rem_euclid(l) as usize).collect();
        Self::linear(self.l, &c)
    }

    pub fn coords(&self, i: usize) -> Vec<usize> {
        let mut c = vec![0; self.d];
        Self::fill_coords(self.l, i, &mut c);
        c
    }

    /// Site `i` shifted by `offset`.
    pub fn offset(&self, i: usize, offset: &[i64]) -> usize {
        let c = self.coords(i);
        let shifted: Vec<i64> = c.iter().zip(offset).map(|(&a, &o)| a as i64 + o).collect();
        self.index(&shifted)
    }

    /// The `2d` nearest neighbors of site `i`, ordered (axis 0: -1, +1), (axis 1: -1, +1), ...
    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * 2 * self.d..(i + 1) * 2 * self.d]
    }

    /// l1 distance on the torus.
    pub fn distance(&self, a: usize, b: usize) -> usize {
        let (ca, cb) = (self.coords(a), self.coords(b));
        ca.iter()
            .zip(&cb)
            .map(|(&x, &y)| {
                let d = x.abs_diff(y);
                d.min(self.l - d)
            })
            .sum()
    }

    /// Sites at distance at most `r` from `i`, in increasing index order.
    pub fn ball(&self, i: usize, r: usize) -> Vec<usize> {
        (0..self.n).filter(|&q| self.distance(i, q) <= r).collect()
    }
}

/// Read access to the sites around the one being updated by a custom coupling.
pub struct Stencil<'a> {
    torus: &'a Torus,
    get: &'a dyn Fn(usize) -> f64,
    center: usize,
    eps: f64,
}

impl Stencil<'_> {
    pub fn center(&self) -> f64 {
        (self.get)(self.center)
    }

    /// Value at the site displaced by `offset` from the center.
    pub fn at(&self, offset: &[i64]) -> f64 {
        (self.get)(self.torus.offset(self.center, offset))
    }

    pub fn neighbors(&self) -> impl Iterator<Item = f64> + '_ {
        self.torus.neighbors(self.center).iter().map(|&q| (self.get)(q))
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn dim(&self) -> usize {
        self.torus.dim()
    }
}

type Rule = dyn Fn(&Stencil<'_>) -> f64 + Send + Sync;

/// User-supplied coupling `x_p -> x_p + A_p(x)`. The rule returns `A_p`.
#[derive(Clone)]
pub struct CustomCoupling {
    name: String,
    rule: Arc<Rule>,
    clamped: Arc<AtomicU64>,
}

impl CustomCoupling {
    pub fn new(name: impl Into<String>, rule: impl Fn(&Stencil<'_>) -> f64 + Send + Sync + 'static) -> Self {
        CustomCoupling {
            name: name.into(),
            rule: Arc::new(rule),
            clamped: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of site updates that left `[0,1]` and were clamped back.
    pub fn clamp_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }
}

impl fmt::Debug for CustomCoupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomCoupling")
            .field("name", &self.name)
            .field("clamped", &self.clamp_count())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum Coupling {
    /// `x_p + eps/(2d) * sum_{|q-p|=1} (x_q - x_p)`.
    Diffusive,
    Custom(CustomCoupling),
}

impl Coupling {
    pub fn is_translation_invariant(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatticeConfigRepr {
    d: usize,
    #[serde(rename = "L")]
    l: usize,
    eps: f64,
    r: usize,
    coupling: String,
    map: SiteMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps_max: Option<f64>,
}

/// Lattice geometry, dynamics and coupling strength.
#[derive(Debug, Clone)]
pub struct LatticeConfig {
    torus: Torus,
    map: SiteMap,
    coupling: Coupling,
    eps: f64,
    r: usize,
    eps_max: f64,
}

impl LatticeConfig {
    pub fn new(d: usize, l: usize, map: SiteMap, coupling: Coupling, eps: f64, r: usize) -> Result<Self> {
        Self::with_eps_max(d, l, map, coupling, eps, r, DEFAULT_EPS_MAX)
    }

    pub fn with_eps_max(
        d: usize,
        l: usize,
        map: SiteMap,
        coupling: Coupling,
        eps: f64,
        r: usize,
        eps_max: f64,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if d == 0 || l == 0 || r == 0 {
            return bad(format!("d, L and r must be positive (d={d}, L={l}, r={r})"));
        }
        if l <= 2 * r {
            return bad(format!("L = {l} must exceed 2r = {}", 2 * r));
        }
        if !(eps >= 0.0) {
            return bad(format!("eps = {eps} must be nonnegative"));
        }
        if eps > eps_max {
            return bad(format!("eps = {eps} exceeds eps_max = {eps_max}"));
        }
        if (l as f64).powi(d as i32) > 1e8 {
            return bad(format!("lattice with L = {l}, d = {d} is too large"));
        }
        Ok(LatticeConfig {
            torus: Torus::new(d, l),
            map,
            coupling,
            eps,
            r,
            eps_max,
        })
    }

    /// One-dimensional diffusive lattice, the common case.
    pub fn diffusive(l: usize, map: SiteMap, eps: f64) -> Result<Self> {
        Self::new(1, l, map, Coupling::Diffusive, eps, 1)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let repr: LatticeConfigRepr = serde_json::from_str(s)?;
        Self::try_from(repr)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&LatticeConfigRepr::try_from(self)?)?)
    }

    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn map(&self) -> &SiteMap {
        &self.map
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn eps_max(&self) -> f64 {
        self.eps_max
    }

    pub fn range(&self) -> usize {
        self.r
    }

    pub fn dim(&self) -> usize {
        self.torus.d
    }

    pub fn side(&self) -> usize {
        self.torus.l
    }

    pub fn n_sites(&self) -> usize {
        self.torus.n
    }

    /// Same lattice with a different coupling strength.
    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        Self::with_eps_max(
            self.torus.d,
            self.torus.l,
            self.map.clone(),
            self.coupling.clone(),
            eps,
            self.r,
            self.eps_max,
        )
    }

    /// Same dynamics on a torus of side `l`.
    pub fn with_side(&self, l: usize) -> Result<Self> {
        Self::with_eps_max(
            self.torus.d,
            l,
            self.map.clone(),
            self.coupling.clone(),
            self.eps,
            self.r,
            self.eps_max,
        )
    }

    /// `[Phi_eps(y)]_p`, reading `y` through `get`.
    #[inline]
    fn coupled_value<F: Fn(usize) -> f64>(&self, p: usize, get: F) -> f64 {
        match &self.coupling {
            Coupling::Diffusive => {
                let yp = get(p);
                if self.eps == 0.0 {
                    return yp;
                }
                let nb = self.torus.neighbors(p);
                let mut acc = 0.0;
                for &q in nb {
                    acc += get(q) - yp;
                }
                (yp + self.eps / nb.len() as f64 * acc).clamp(0.0, 1.0)
            }
            Coupling::Custom(c) => {
                let stencil = Stencil {
                    torus: &self.torus,
                    get: &get,
                    center: p,
                    eps: self.eps,
                };
                let v = get(p) + (c.rule)(&stencil);
                if (0.0..=1.0).contains(&v) {
                    v
                } else {
                    c.clamped.fetch_add(1, Ordering::Relaxed);
                    if v.is_nan() {
                        0.0
                    } else {
                        v.clamp(0.0, 1.0)
                    }
                }
            }
        }
    }

    /// `[T_eps(x)]_p` computed from the sites within range of `p` only.
    pub fn site_image(&self, p: usize, get: &dyn Fn(usize) -> f64) -> f64 {
        let map = &self.map;
        self.coupled_value(p, |q| map.apply(get(q)))
    }

    /// `x <- T_eps(x)`, using `scratch` (same length) for `T_0(x)`.
    #[inline]
    pub fn step_in_place(&self, x: &mut [f64], scratch: &mut [f64]) {
        debug_assert_eq!(x.len(), self.torus.n);
        for (s, &v) in scratch.iter_mut().zip(x.iter()) {
            *s = self.map.apply(v);
        }
        if matches!(self.coupling, Coupling::Diffusive) && self.eps == 0.0 {
            x.copy_from_slice(scratch);
            return;
        }
        let y: &[f64] = scratch;
        for (p, out) in x.iter_mut().enumerate() {
            *out = self.coupled_value(p, |q| y[q]);
        }
    }
}

impl TryFrom<LatticeConfigRepr> for LatticeConfig {
    type Error = Error;
    fn try_from(r: LatticeConfigRepr) -> Result<Self> {
        let coupling = match r.coupling.as_str() {
            "diffusive" => Coupling::Diffusive,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "coupling '{other}' cannot be read from a config file"
                )))
            }
        };
        LatticeConfig::with_eps_max(
            r.d,
            r.l,
            r.map,
            coupling,
            r.eps,
            r.r,
            r.eps_max.unwrap_or(DEFAULT_EPS_MAX),
        )
    }
}

impl TryFrom<&LatticeConfig> for LatticeConfigRepr {
    type Error = Error;
    fn try_from(c: &LatticeConfig) -> Result<Self> {
        let coupling = match &c.coupling {
            Coupling::Diffusive => "diffusive".to_string(),
            Coupling::Custom(cc) => {
                return Err(Error::InvalidConfig(format!(
                    "custom coupling '{}' is not serializable",
                    cc.name
                )))
            }
        };
        Ok(LatticeConfigRepr {
            d: c.torus.d,
            l: c.torus.l,
            eps: c.eps,
            r: c.r,
            coupling,
            map: c.map.clone(),
            eps_max: (c.eps_max != DEFAULT_EPS_MAX).then_some(c.eps_max),
        })
    }
}

impl<'de> Deserialize<'de> for LatticeConfig {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let repr = LatticeConfigRepr::deserialize(de)?;
        LatticeConfig::try_from(repr).map_err(serde::de::Error::custom)
    }
}

impl Serialize for LatticeConfig {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        LatticeConfigRepr::try_from(self)
            .map_err(serde::ser::Error::custom)?
            .serialize(ser)
    }
}

/// A point of `[0,1]^{torus}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeState {
    sites: Vec<f64>,
}

impl LatticeState {
    pub fn new(sites: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = sites.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(bad));
        }
        Ok(LatticeState { sites })
    }

    pub fn constant(n: usize, c: f64) -> Self {
        LatticeState { sites: vec![c; n] }
    }

    /// Product-Lebesgue random state.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        LatticeState {
            sites: (0..n).map(|_| rng.random::<f64>()).collect(),
        }
    }

    pub fn sites(&self) -> &[f64] {
        &self.sites
    }

    pub fn sites_mut(&mut self) -> &mut [f64] {
        &mut self.sites
    }

    pub fn into_sites(self) -> Vec<f64> {
        self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Translate the configuration by `shift` on the torus.
    pub fn translated(&self, torus: &Torus, shift: &[i64]) -> Self {
        let mut out = vec![0.0; self.sites.len()];
        for (i, &v) in self.sites.iter().enumerate() {
            out[torus.offset(i, shift)] = v;
        }
        LatticeState { sites: out }
    }
}

fn check_len(cfg: &LatticeConfig, s: &LatticeState) {
    assert_eq!(
        s.len(),
        cfg.n_sites(),
        "state has {} sites, lattice has {}",
        s.len(),
        cfg.n_sites()
    );
}

/// Sitewise `tau`.
pub fn apply_t0(cfg: &LatticeConfig, s: &LatticeState) -> LatticeState {
    check_len(cfg, s);
    LatticeState {
        sites: s.sites.iter().map(|&x| cfg.map.apply(x)).collect(),
    }
}

/// `Phi_eps`, reading the pre-coupling state only.
pub fn apply_coupling(cfg: &LatticeConfig, s: &LatticeState) -> LatticeState {
    check_len(cfg, s);
    let y = &s.sites;
    LatticeState {
        sites: (0..y.len()).map(|p| cfg.coupled_value(p, |q| y[q])).collect(),
    }
}

/// `T_eps = Phi_eps ∘ T_0`.
pub fn step(cfg: &LatticeConfig, s: &LatticeState) -> LatticeState {
    apply_coupling(cfg, &apply_t0(cfg, s))
}

/// Empirical check of the coupling assumptions: the size of `A_eps`, of its
/// first and second derivatives, and locality of `D Phi_eps`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsReport {
    pub eps: f64,
    pub range: usize,
    pub n_samples: usize,
    /// `2 eps + 1e-4`.
    pub bound: f64,
    pub sup_a: f64,
    pub sup_da: f64,
    pub sup_d2a: f64,
    pub a_ok: bool,
    pub da_ok: bool,
    pub d2a_ok: bool,
    /// Largest `|d Phi_q / d x_p|` over pairs with `|p - q| > r`.
    pub max_nonlocal: f64,
    pub locality_ok: bool,
    /// `(q, p)` of the worst locality violation.
    pub locality_violation: Option<(usize, usize)>,
}

impl BoundsReport {
    pub fn all_ok(&self) -> bool {
        self.a_ok && self.da_ok && self.d2a_ok && self.locality_ok
    }
}

const FD_STEP: f64 = 1e-6;
const FD2_STEP: f64 = 1e-4;

/// `A_eps(x) = Phi_eps(x) - x` on every site.
fn displacement(cfg: &LatticeConfig, x: &[f64]) -> Vec<f64> {
    (0..x.len()).map(|p| cfg.coupled_value(p, |q| x[q]) - x[p]).collect()
}

/// Displacement without clamping, so finite differences see the raw rule.
fn raw_displacement(cfg: &LatticeConfig, x: &[f64], q: usize) -> f64 {
    match &cfg.coupling {
        Coupling::Diffusive => {
            let nb = cfg.torus.neighbors(q);
            let acc: f64 = nb.iter().map(|&k| x[k] - x[q]).sum();
            cfg.eps / nb.len() as f64 * acc
        }
        Coupling::Custom(c) => {
            let get = |k: usize| x[k];
            let stencil = Stencil {
                torus: &cfg.torus,
                get: &get,
                center: q,
                eps: cfg.eps,
            };
            (c.rule)(&stencil)
        }
    }
}

pub fn verify_coupling_bounds(cfg: &LatticeConfig, n_samples: usize, seed: u64) -> BoundsReport {
    let n = cfg.n_sites();
    let r = cfg.r;
    let mut sup_a: f64 = 0.0;
    let mut sup_da: f64 = 0.0;
    let mut sup_d2a: f64 = 0.0;
    let mut max_nonlocal: f64 = 0.0;
    let mut violation = None;

    for sample in 0..n_samples.max(1) {
        let mut rng = rng::stream(seed, Domain::Probe, sample as u64);
        let x: Vec<f64> = (0..n).map(|_| 1e-3 + (1.0 - 2e-3) * rng.random::<f64>()).collect();
        for a in displacement(cfg, &x) {
            sup_a = sup_a.max(a.abs());
        }
        let p = rng.random_range(0..n);

        // first derivatives d A_q / d x_p for every q
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[p] += FD_STEP;
        xm[p] -= FD_STEP;
        for q in 0..n {
            let da = (raw_displacement(cfg, &xp, q) - raw_displacement(cfg, &xm, q)) / (2.0 * FD_STEP);
            if cfg.torus.distance(p, q) > r {
                // d Phi_q / d x_p = d A_q / d x_p off the diagonal
                if da.abs() > max_nonlocal {
                    max_nonlocal = da.abs();
                    if da.abs() > 1e-8 {
                        violation = Some((q, p));
                    }
                }
            } else {
                sup_da = sup_da.max(da.abs());
            }
        }

        // mixed second derivatives d_k (DA)_{qp} on the stencil of p
        let h = FD2_STEP;
        for q in cfg.torus.ball(p, r) {
            for k in cfg.torus.ball(q, r) {
                let eval = |sp: f64, sk: f64| {
                    let mut y = x.clone();
                    y[p] += sp;
                    y[k] += sk;
                    raw_displacement(cfg, &y, q)
                };
                let d2 = (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h);
                sup_d2a = sup_d2a.max(d2.abs());
            }
        }
    }

    let bound = 2.0 * cfg.eps + 1e-4;
    BoundsReport {
        eps: cfg.eps,
        range: r,
        n_samples,
        bound,
        sup_a,
        sup_da,
        sup_d2a,
        a_ok: sup_a <= bound,
        da_ok: sup_da <= bound,
        d2a_ok: sup_d2a <= bound,
        max_nonlocal,
        locality_ok: max_nonlocal <= 1e-8,
        locality_violation: violation,
    }
}
