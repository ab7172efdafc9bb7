//! Single-site piecewise expanding maps of the unit interval and their exact
//! transfer operator on piecewise-constant densities.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when a point is compared against the interval ends or a
/// grid breakpoint.
pub const DOMAIN_TOL: f64 = 1e-12;

/// Branch of a site map on one monotonicity interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Branch {
    /// `tau(x) = a * x + b`.
    Linear { a: f64, b: f64 },
    /// Polynomial `tau(x) = sum_k coeffs[k] * x^k`.
    Expr { coeffs: Vec<f64> },
}

impl Branch {
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match self {
            Branch::Linear { a, b } => a * x + b,
            Branch::Expr { coeffs } => coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Branch::Linear { a, .. } => *a,
            Branch::Expr { coeffs } => coeffs
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, &c)| acc * x + k as f64 * c),
        }
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        match self {
            Branch::Linear { .. } => 0.0,
            Branch::Expr { coeffs } => coeffs
                .iter()
                .enumerate()
                .skip(2)
                .rev()
                .fold(0.0, |acc, (k, &c)| acc * x + (k * (k - 1)) as f64 * c),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Branch::Linear { .. })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SiteMapRepr {
    singularities: Vec<f64>,
    branches: Vec<Branch>,
}

/// Continuous, piecewise monotone map `tau: [0,1] -> [0,1]`.
///
/// Construction checks the structure (ordered singularities from 0 to 1, one
/// strictly monotone branch per interval, image inside `[0,1]`). The dynamical
/// hypotheses (continuity, `inf |tau'| > 2`) are reported by [`validate`] so
/// that maps violating them can still be built and inspected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SiteMapRepr", into = "SiteMapRepr")]
pub struct SiteMap {
    singularities: Vec<f64>,
    branches: Vec<Branch>,
    increasing: Vec<bool>,
    min_slope: f64,
}

impl TryFrom<SiteMapRepr> for SiteMap {
    type Error = Error;
    fn try_from(r: SiteMapRepr) -> Result<Self> {
        SiteMap::new(r.singularities, r.branches)
    }
}

impl From<SiteMap> for SiteMapRepr {
    fn from(m: SiteMap) -> Self {
        SiteMapRepr {
            singularities: m.singularities,
            branches: m.branches,
        }
    }
}

const STRUCTURE_PROBES: usize = 257;

impl SiteMap {
    pub fn new(singularities: Vec<f64>, branches: Vec<Branch>) -> Result<Self> {
        let invalid = |m: String| Err(Error::InvalidMap(m));
        if branches.is_empty() {
            return invalid("at least one branch is required".into());
        }
        if singularities.len() != branches.len() + 1 {
            return invalid(format!(
                "{} branches need {} singularities, got {}",
                branches.len(),
                branches.len() + 1,
                singularities.len()
            ));
        }
        if singularities[0] != 0.0 || *singularities.last().unwrap() != 1.0 {
            return invalid("singularities must start at 0 and end at 1".into());
        }
        if singularities.windows(2).any(|w| !(w[0] < w[1])) {
            return invalid("singularities must be strictly increasing".into());
        }
        let mut increasing = Vec::with_capacity(branches.len());
        let mut min_slope = f64::INFINITY;
        for (j, br) in branches.iter().enumerate() {
            let (lo, hi) = (singularities[j], singularities[j + 1]);
            let mut sign = 0.0;
            for i in 0..STRUCTURE_PROBES {
                let x = lo + (hi - lo) * i as f64 / (STRUCTURE_PROBES - 1) as f64;
                let y = br.value(x);
                if !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&y) {
                    return invalid(format!("branch {j} leaves [0,1] at x = {x}: tau = {y}"));
                }
                let s = br.derivative(x);
                if s == 0.0 || !s.is_finite() || (sign != 0.0 && s.signum() != sign) {
                    return invalid(format!("branch {j} is not strictly monotone at x = {x}"));
                }
                sign = s.signum();
                min_slope = min_slope.min(s.abs());
            }
            increasing.push(sign > 0.0);
        }
        Ok(SiteMap {
            singularities,
            branches,
            increasing,
            min_slope,
        })
    }

    /// Continuous piecewise-linear map through the knots `(x_i, y_i)`.
    pub fn piecewise_linear(knots: &[(f64, f64)]) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidMap("need at least two knots".into()));
        }
        let singularities = knots.iter().map(|k| k.0).collect();
        let branches = knots
            .windows(2)
            .map(|w| {
                let a = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
                Branch::Linear {
                    a,
                    b: w[0].1 - a * w[0].0,
                }
            })
            .collect();
        SiteMap::new(singularities, branches)
    }

    /// Full-branch zigzag with `s` linear branches of slope `±s`; continuous for
    /// every `s`, and Lebesgue measure is invariant.
    pub fn zigzag(s: usize) -> Self {
        assert!(s >= 1);
        let sf = s as f64;
        let singularities: Vec<f64> = (0..=s).map(|j| j as f64 / sf).collect();
        let branches = (0..s)
            .map(|j| {
                if j % 2 == 0 {
                    Branch::Linear { a: sf, b: -(j as f64) }
                } else {
                    Branch::Linear {
                        a: -sf,
                        b: (j + 1) as f64,
                    }
                }
            })
            .collect();
        SiteMap::new(singularities, branches).expect("zigzag map is well formed")
    }

    /// `3x` on `[0,1/3]`, `2-3x` on `[1/3,2/3]`, `3x-2` on `[2/3,1]`.
    pub fn zigzag3() -> Self {
        SiteMap::zigzag(3)
    }

    /// Tent map `1 - |2x - 1|` (slope exactly 2).
    pub fn tent() -> Self {
        SiteMap::zigzag(2)
    }

    pub fn singularities(&self) -> &[f64] {
        &self.singularities
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn is_increasing(&self, branch: usize) -> bool {
        self.increasing[branch]
    }

    /// `inf |tau'|`, exact for linear branches and sampled otherwise.
    pub fn min_slope(&self) -> f64 {
        self.min_slope
    }

    pub fn is_piecewise_linear(&self) -> bool {
        self.branches.iter().all(Branch::is_linear)
    }

    /// Index of the branch used at `x` (right-continuous, last branch at 1).
    #[inline]
    pub fn branch_index(&self, x: f64) -> usize {
        let last = self.branches.len() - 1;
        let mut j = 0;
        while j < last && x >= self.singularities[j + 1] {
            j += 1;
        }
        j
    }

    /// `tau(x)` for `x` already known to lie in `[0,1]`.
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        self.branches[self.branch_index(x)].value(x).clamp(0.0, 1.0)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.branches[self.branch_index(x)].derivative(x)
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        self.branches[self.branch_index(x)].second_derivative(x)
    }
}

/// `tau(x)`, with a domain check.
pub fn eval_map(map: &SiteMap, x: f64) -> Result<f64> {
    if !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&x) || x.is_nan() {
        return Err(Error::Domain(x));
    }
    Ok(map.apply(x.clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub continuity_ok: bool,
    /// Singularity with the largest jump, when continuity fails.
    pub continuity_failure: Option<f64>,
    pub max_jump: f64,
    pub expansion_ok: bool,
    pub min_sampled_slope: f64,
    /// Probe location of the smallest slope, when expansion fails.
    pub expansion_failure: Option<f64>,
    pub range_ok: bool,
    pub range_failure: Option<f64>,
}

impl ValidationReport {
    pub fn all_ok(&self) -> bool {
        self.continuity_ok && self.expansion_ok && self.range_ok
    }
}

/// Checks continuity at the singularities, `inf |tau'| > 2` and `tau(I) ⊂ I`
/// on `n_probe` points per branch (endpoints included).
pub fn validate(map: &SiteMap, n_probe: usize) -> ValidationReport {
    let n_probe = n_probe.max(2);
    let z = &map.singularities;

    let mut max_jump: f64 = 0.0;
    let mut jump_at = None;
    for j in 1..map.branches.len() {
        let jump = (map.branches[j - 1].value(z[j]) - map.branches[j].value(z[j])).abs();
        if jump > max_jump {
            max_jump = jump;
            jump_at = Some(z[j]);
        }
    }
    let continuity_ok = max_jump <= 1e-10;

    let mut min_slope = f64::INFINITY;
    let mut min_slope_at = 0.0;
    let mut range_failure = None;
    for (j, br) in map.branches.iter().enumerate() {
        let (lo, hi) = (z[j], z[j + 1]);
        for i in 0..n_probe {
            let x = lo + (hi - lo) * i as f64 / (n_probe - 1) as f64;
            let s = br.derivative(x).abs();
            if s < min_slope {
                min_slope = s;
                min_slope_at = x;
            }
            let y = br.value(x);
            if range_failure.is_none() && !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&y) {
                range_failure = Some(x);
            }
        }
    }
    let expansion_ok = min_slope > 2.0;

    ValidationReport {
        continuity_ok,
        continuity_failure: if continuity_ok { None } else { jump_at },
        max_jump,
        expansion_ok,
        min_sampled_slope: min_slope,
        expansion_failure: if expansion_ok { None } else { Some(min_slope_at) },
        range_ok: range_failure.is_none(),
        range_failure,
    }
}

/// Piecewise-constant (complex) density with respect to Lebesgue measure on a
/// grid `0 = g_0 < ... < g_M = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PCDensity {
    grid: Vec<f64>,
    values: Vec<Complex64>,
}

impl PCDensity {
    pub fn new(grid: Vec<f64>, values: Vec<Complex64>) -> Result<Self> {
        if grid.len() < 2 || values.len() + 1 != grid.len() {
            return Err(Error::InvalidConfig(format!(
                "grid with {} points cannot carry {} cell values",
                grid.len(),
                values.len()
            )));
        }
        if grid[0] != 0.0 || *grid.last().unwrap() != 1.0 || grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig("grid must increase strictly from 0 to 1".into()));
        }
        Ok(PCDensity { grid, values })
    }

    pub fn uniform_grid(m: usize) -> Vec<f64> {
        let mut g: Vec<f64> = (0..=m).map(|i| i as f64 / m as f64).collect();
        g[m] = 1.0;
        g
    }

    /// Density on the uniform grid with `values.len()` cells.
    pub fn on_uniform(values: Vec<Complex64>) -> Self {
        let grid = Self::uniform_grid(values.len());
        PCDensity { grid, values }
    }

    pub fn from_real(values: &[f64]) -> Self {
        Self::on_uniform(values.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    pub fn zeros_like(&self) -> Self {
        PCDensity {
            grid: self.grid.clone(),
            values: vec![Complex64::new(0.0, 0.0); self.values.len()],
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    pub fn width(&self, j: usize) -> f64 {
        self.grid[j + 1] - self.grid[j]
    }

    pub fn center(&self, j: usize) -> f64 {
        0.5 * (self.grid[j] + self.grid[j + 1])
    }

    /// `sum_j v_j (g_{j+1} - g_j)`.
    pub fn mass(&self) -> Complex64 {
        self.values.iter().enumerate().map(|(j, v)| v * self.width(j)).sum()
    }

    /// Index of the cell containing `x` (right-continuous).
    pub fn cell_of(&self, x: f64) -> usize {
        let m = self.values.len();
        match self.grid.partition_point(|&g| g <= x) {
            0 => 0,
            p => (p - 1).min(m - 1),
        }
    }

    /// Value at `x` (right-continuous, zero outside `[0,1]`).
    pub fn value_at(&self, x: f64) -> Complex64 {
        if !(0.0..=1.0).contains(&x) {
            return Complex64::new(0.0, 0.0);
        }
        self.values[self.cell_of(x)]
    }

    /// Index `i` with `|grid[i] - y| <= tol`, if any.
    fn grid_index(&self, y: f64) -> Option<usize> {
        let p = self.grid.partition_point(|&g| g < y - DOMAIN_TOL);
        (p < self.grid.len() && (self.grid[p] - y).abs() <= DOMAIN_TOL).then_some(p)
    }
}

/// Pushforward `(P d)(y) = sum_b d(v_b(y)) |v_b'(y)|` over the inverse branches.
///
/// Exact for piecewise-linear maps on grids where every branch maps every grid
/// cell (or its part inside the branch interval) onto a union of grid cells.
pub fn transfer_apply(map: &SiteMap, d: &PCDensity) -> Result<PCDensity> {
    if !map.is_piecewise_linear() {
        return Err(Error::Alignment(
            "exact transfer needs piecewise-linear branches".into(),
        ));
    }
    let z = map.singularities();
    let mut out = d.zeros_like();
    for (b, br) in map.branches().iter().enumerate() {
        let (lo, hi) = (z[b], z[b + 1]);
        let slope = br.derivative(lo).abs();
        let first = d.cell_of(lo);
        for j in first..d.cells() {
            let l = d.grid[j].max(lo);
            let h = d.grid[j + 1].min(hi);
            if h <= l {
                if d.grid[j] >= hi {
                    break;
                }
                continue;
            }
            let (y0, y1) = {
                let (a, c) = (br.value(l), br.value(h));
                if a <= c {
                    (a, c)
                } else {
                    (c, a)
                }
            };
            let (i0, i1) = match (d.grid_index(y0), d.grid_index(y1)) {
                (Some(i0), Some(i1)) => (i0, i1),
                _ => {
                    return Err(Error::Alignment(format!(
                        "branch {b} maps [{l}, {h}] onto [{y0}, {y1}], which is not a union of grid cells"
                    )))
                }
            };
            let contribution = d.values[j] / slope;
            for v in &mut out.values[i0..i1] {
                *v += contribution;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(x: f64) -> Complex64 {
        Complex64::new(x, 0.0)
    }

    #[test]
    fn zigzag3_values() {
        let m = SiteMap::zigzag3();
        assert_eq!(eval_map(&m, 0.0).unwrap(), 0.0);
        assert_eq!(eval_map(&m, 0.5).unwrap(), 0.5);
        assert_abs_diff_eq!(eval_map(&m, 1.0 / 3.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(eval_map(&m, 1.0).unwrap(), 1.0);
        assert_abs_diff_eq!(eval_map(&m, 0.1).unwrap(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn eval_domain_errors() {
        let m = SiteMap::zigzag3();
        assert!(matches!(eval_map(&m, -1e-9), Err(Error::Domain(_))));
        assert!(matches!(eval_map(&m, 1.0 + 1e-9), Err(Error::Domain(_))));
        assert!(eval_map(&m, 1.0 + 1e-13).is_ok());
        assert!(eval_map(&m, f64::NAN).is_err());
    }

    #[test]
    fn right_continuous_at_singularities() {
        let m = SiteMap::zigzag3();
        assert_eq!(m.branch_index(1.0 / 3.0), 1);
        assert_eq!(m.branch_index(2.0 / 3.0), 2);
        assert_eq!(m.branch_index(1.0), 2);
        assert_eq!(m.branch_index(0.0), 0);
    }

    #[test]
    fn validate_zigzag3_passes() {
        let r = validate(&SiteMap::zigzag3(), 16);
        assert!(r.all_ok(), "{r:?}");
        assert_eq!(r.min_sampled_slope, 3.0);
        assert_eq!(SiteMap::zigzag3().min_slope(), 3.0);
    }

    #[test]
    fn validate_rejects_weak_expansion() {
        // slope 1.5 on the first branch, 4.5 on the second
        let m = SiteMap::piecewise_linear(&[(0.0, 0.0), (0.5, 0.75), (2.0 / 3.0, 0.0), (1.0, 1.0)]).unwrap();
        let r = validate(&m, 8);
        assert!(r.continuity_ok);
        assert!(!r.expansion_ok);
        assert_abs_diff_eq!(r.min_sampled_slope, 1.5, epsilon = 1e-12);
        assert!(r.expansion_failure.unwrap() <= 0.5);

        let tent = validate(&SiteMap::tent(), 8);
        assert!(!tent.expansion_ok);
        assert_eq!(tent.min_sampled_slope, 2.0);
    }

    #[test]
    fn validate_reports_discontinuity() {
        let m = SiteMap::new(
            vec![0.0, 1.0 / 3.0, 1.0],
            vec![
                Branch::Linear { a: 3.0, b: 0.0 },
                Branch::Linear {
                    a: 1.5 * 0.99,
                    b: -0.49,
                },
            ],
        )
        .unwrap();
        let r = validate(&m, 8);
        assert!(!r.continuity_ok);
        assert_eq!(r.continuity_failure, Some(1.0 / 3.0));
    }

    #[test]
    fn construction_rejects_bad_structure() {
        assert!(SiteMap::new(vec![0.0, 1.0], vec![]).is_err());
        assert!(SiteMap::new(vec![0.0, 0.6, 0.5, 1.0], vec![Branch::Linear { a: 1.0, b: 0.0 }; 3]).is_err());
        // leaves [0,1]
        assert!(SiteMap::new(vec![0.0, 1.0], vec![Branch::Linear { a: 3.0, b: 0.0 }]).is_err());
        // not monotone: x^2 - x on [0,1]
        assert!(SiteMap::new(
            vec![0.0, 1.0],
            vec![Branch::Expr {
                coeffs: vec![0.5, -1.0, 1.0]
            }]
        )
        .is_err());
    }

    #[test]
    fn polynomial_branch_derivatives() {
        let b = Branch::Expr {
            coeffs: vec![0.0, 2.0, 1.0],
        };
        assert_eq!(b.value(0.5), 1.25);
        assert_eq!(b.derivative(0.5), 3.0);
        assert_eq!(b.second_derivative(0.5), 2.0);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = SiteMap::piecewise_linear(&[(0.0, 0.0), (0.3, 1.0), (0.7, 0.0), (1.0, 1.0)]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"kind\":\"linear\""));
        let back: SiteMap = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.branches().iter().zip(m.branches()) {
            match (a, b) {
                (Branch::Linear { a: a1, b: b1 }, Branch::Linear { a: a2, b: b2 }) => {
                    assert_eq!(a1.to_bits(), a2.to_bits());
                    assert_eq!(b1.to_bits(), b2.to_bits());
                }
                _ => unreachable!(),
            }
        }
        let bad = r#"{"singularities":[0,1],"branches":[{"kind":"linear","a":1,"b":0}],"extra":1}"#;
        assert!(serde_json::from_str::<SiteMap>(bad).is_err());
    }

    #[test]
    fn transfer_of_uniform_is_uniform() {
        let m = SiteMap::zigzag3();
        let d = PCDensity::from_real(&[1.0; 27]);
        let p = transfer_apply(&m, &d).unwrap();
        for v in p.values() {
            assert_abs_diff_eq!(v.re, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn transfer_of_first_third_indicator() {
        let m = SiteMap::zigzag3();
        let vals: Vec<f64> = (0..27).map(|j| if j < 9 { 3.0 } else { 0.0 }).collect();
        let p = transfer_apply(&m, &PCDensity::from_real(&vals)).unwrap();
        for v in p.values() {
            assert_abs_diff_eq!(v.re, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn transfer_of_zero_is_zero() {
        let p = transfer_apply(&SiteMap::zigzag3(), &PCDensity::from_real(&[0.0; 9])).unwrap();
        assert!(p.values().iter().all(|v| *v == c(0.0)));
    }

    #[test]
    fn transfer_rejects_misaligned_grid() {
        // any uniform grid is aligned for zigzag3, so misalign by hand
        let d = PCDensity::new(vec![0.0, 0.25, 0.6, 1.0], vec![c(1.0); 3]).unwrap();
        assert!(matches!(
            transfer_apply(&SiteMap::zigzag3(), &d),
            Err(Error::Alignment(_))
        ));
        let poly = SiteMap::new(
            vec![0.0, 1.0],
            vec![Branch::Expr {
                coeffs: vec![0.0, 0.5, 0.5],
            }],
        )
        .unwrap();
        assert!(transfer_apply(&poly, &PCDensity::from_real(&[1.0; 3])).is_err());
    }

    #[test]
    fn coarse_grid_single_cell_spreads() {
        // M = 3: the first cell maps onto all of [0,1]
        let p = transfer_apply(&SiteMap::zigzag3(), &PCDensity::from_real(&[3.0, 0.0, 0.0])).unwrap();
        for v in p.values() {
            assert_abs_diff_eq!(v.re, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn pc_density_cell_lookup() {
        let d = PCDensity::from_real(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d.cell_of(0.0), 0);
        assert_eq!(d.cell_of(0.25), 1);
        assert_eq!(d.cell_of(1.0), 3);
        assert_eq!(d.value_at(0.6), c(3.0));
        assert_eq!(d.value_at(1.5), c(0.0));
        assert_abs_diff_eq!(d.mass().re, 2.5, epsilon = 1e-15);
    }
}
