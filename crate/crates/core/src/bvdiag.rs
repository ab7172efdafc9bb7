//! Bounded-variation diagnostics for piecewise-constant densities.
//!
//! Densities are extended by zero outside `[0, 1]`, so the variation counts the
//! jumps at both ends of the interval.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::{self, Domain};
use crate::sitemap::{transfer_apply, PCDensity, SiteMap};

/// Contraction factor of the single-site inequality
/// `Var(P d) <= alpha2 Var(d) + C |d|` for the three-branch zigzag.
pub const LASOTA_YORKE_ALPHA2: f64 = 2.0 / 3.0;

/// Constant `C` of that inequality for the three-branch zigzag, fixed from a
/// brute-force sweep over random densities (see the ignored test
/// `lasota_yorke_calibration_sweep`). The largest ratios come from indicators
/// straddling the middle branch, for which the ratio tends to 2 as the grid is
/// refined.
pub const LASOTA_YORKE_C: f64 = 2.0;

fn variation_of(values: impl IntoIterator<Item = Complex64>) -> f64 {
    let mut prev = Complex64::new(0.0, 0.0);
    let mut total = 0.0;
    for v in values {
        total += (v - prev).norm();
        prev = v;
    }
    total + prev.norm()
}

/// `|v_1| + sum |v_{j+1} - v_j| + |v_M|`.
pub fn variation(d: &PCDensity) -> f64 {
    variation_of(d.values().iter().copied())
}

/// `∫ |d| dm`.
pub fn total_mass_norm(d: &PCDensity) -> f64 {
    d.values().iter().enumerate().map(|(j, v)| v.norm() * d.width(j)).sum()
}

pub fn sup_norm(d: &PCDensity) -> f64 {
    d.values().iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Cellwise modulus.
pub fn absolute_value(d: &PCDensity) -> PCDensity {
    let mut out = d.clone();
    out.values_mut()
        .iter_mut()
        .for_each(|v| *v = Complex64::new(v.norm(), 0.0));
    out
}

/// Cellwise product with `u`, sampled at the cell centers.
///
/// `lip` is the declared Lipschitz constant of `u`; it only enters
/// [`lipschitz_bound`], which is returned alongside the product.
pub fn lipschitz_multiply(d: &PCDensity, u: &[f64], lip: f64) -> (PCDensity, f64) {
    assert_eq!(u.len(), d.cells(), "one sample of u per cell");
    let mut out = d.clone();
    out.values_mut().iter_mut().zip(u).for_each(|(v, &s)| *v *= s);
    let sup_u = u.iter().map(|s| s.abs()).fold(0.0, f64::max);
    (out, lipschitz_bound(d, sup_u, lip))
}

/// `sup|u| Var(d) + Lip(u) |d|`, plus the grid slack `2 Lip(u) sup|d| / M`.
pub fn lipschitz_bound(d: &PCDensity, sup_u: f64, lip: f64) -> f64 {
    sup_u * variation(d) + lip * total_mass_norm(d) + 2.0 * lip * sup_norm(d) / d.cells() as f64
}

/// Piecewise-constant density on a uniform `m0 x m1` grid of the unit square,
/// axis 0 fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity2 {
    m0: usize,
    m1: usize,
    values: Vec<Complex64>,
}

impl GridDensity2 {
    pub fn new(m0: usize, m1: usize, values: Vec<Complex64>) -> Self {
        assert!(m0 > 0 && m1 > 0 && values.len() == m0 * m1, "grid shape mismatch");
        GridDensity2 { m0, m1, values }
    }

    pub fn from_real(m0: usize, m1: usize, values: &[f64]) -> Self {
        Self::new(m0, m1, values.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    /// Density of a vector of cell masses over an `m x m` grid (for example a
    /// two-site Ulam vector).
    pub fn from_masses(m: usize, masses: &[f64]) -> Self {
        let area = 1.0 / (m * m) as f64;
        Self::new(m, m, masses.iter().map(|&p| Complex64::new(p / area, 0.0)).collect())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.m0, self.m1)
    }

    pub fn at(&self, i0: usize, i1: usize) -> Complex64 {
        self.values[i0 + self.m0 * i1]
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn total_mass_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).sum::<f64>() / (self.m0 * self.m1) as f64
    }

    /// Variation along `axis`: the one-dimensional variation of each slice
    /// along that axis, integrated over the other coordinate.
    pub fn axis_variation(&self, axis: usize) -> f64 {
        match axis {
            0 => {
                (0..self.m1)
                    .map(|i1| variation_of((0..self.m0).map(|i0| self.at(i0, i1))))
                    .sum::<f64>()
                    / self.m1 as f64
            }
            1 => {
                (0..self.m0)
                    .map(|i0| variation_of((0..self.m1).map(|i1| self.at(i0, i1))))
                    .sum::<f64>()
                    / self.m0 as f64
            }
            _ => panic!("axis {axis} out of range for a 2D grid"),
        }
    }

    /// Supremum of the per-axis variations.
    pub fn variation(&self) -> f64 {
        self.axis_variation(0).max(self.axis_variation(1))
    }

    /// Marginal on `axis` as a one-dimensional density.
    pub fn marginal(&self, axis: usize) -> PCDensity {
        let (m, other) = if axis == 0 {
            (self.m0, self.m1)
        } else {
            (self.m1, self.m0)
        };
        let vals = (0..m)
            .map(|i| {
                (0..other)
                    .map(|k| if axis == 0 { self.at(i, k) } else { self.at(k, i) })
                    .sum::<Complex64>()
                    / other as f64
            })
            .collect();
        PCDensity::on_uniform(vals)
    }
}

/// `(Var(P d) - alpha2 Var(d)) / |d|`, the smallest `C` that makes the
/// single-site inequality hold for `d`.
pub fn lasota_yorke_ratio(map: &SiteMap, d: &PCDensity, alpha2: f64) -> Result<f64> {
    let pd = transfer_apply(map, d)?;
    Ok((variation(&pd) - alpha2 * variation(d)) / total_mass_norm(d))
}

/// Grid sizes used by [`random_suite`]; all multiples of 3.
pub const SUITE_GRIDS: [usize; 6] = [3, 9, 27, 81, 243, 30];

/// Random piecewise-constant densities of mixed shapes on uniform grids:
/// i.i.d. signed values, nonnegative values, interval indicators, smooth
/// cosine sums, random walks and unit-modulus complex phases.
pub fn random_suite(n: usize, seed: u64) -> Vec<PCDensity> {
    (0..n)
        .map(|i| {
            let mut rng = rng::stream(seed, Domain::Probe, i as u64);
            let m = SUITE_GRIDS[rng.random_range(0..SUITE_GRIDS.len())];
            let c = |re: f64| Complex64::new(re, 0.0);
            let vals: Vec<Complex64> = match i % 6 {
                0 => (0..m).map(|_| c(rng.random_range(-1.0..1.0))).collect(),
                1 => (0..m).map(|_| c(rng.random_range(0.0..2.0))).collect(),
                2 => {
                    let a = rng.random_range(0..m);
                    let b = rng.random_range(a..m);
                    let h = rng.random_range(0.1..3.0);
                    (0..m).map(|j| c(if (a..=b).contains(&j) { h } else { 0.0 })).collect()
                }
                3 => {
                    let amp: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                    (0..m)
                        .map(|j| {
                            let x = (j as f64 + 0.5) / m as f64;
                            c(amp
                                .iter()
                                .enumerate()
                                .map(|(k, a)| a * (std::f64::consts::PI * k as f64 * x).cos())
                                .sum())
                        })
                        .collect()
                }
                4 => {
                    let mut w = 0.0;
                    (0..m)
                        .map(|_| {
                            w += rng.random_range(-1.0..1.0);
                            c(w)
                        })
                        .collect()
                }
                _ => (0..m)
                    .map(|_| {
                        Complex64::from_polar(rng.random_range(0.1..2.0), rng.random_range(0.0..std::f64::consts::TAU))
                    })
                    .collect(),
            };
            let mut d = PCDensity::on_uniform(vals);
            if d.values().iter().all(|v| v.norm() == 0.0) {
                d.values_mut()[0] = c(1.0);
            }
            d
        })
        .collect()
}

/// Violation counts of the variation inequalities over a random suite.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BvSuiteReport {
    pub n: usize,
    /// `Var|d| <= Var d`.
    pub abs_violations: usize,
    /// `|d| <= Var(d) / 2`.
    pub two_norm_violations: usize,
    /// Multiplier bound of [`lipschitz_multiply`].
    pub lipschitz_violations: usize,
    /// `Var(c d) = |c| Var(d)` and `Var(d + e) <= Var d + Var e`.
    pub seminorm_violations: usize,
    /// `Var(P d) <= alpha2 Var(d) + C |d|` for the three-branch zigzag.
    pub lasota_yorke_violations: usize,
    /// Largest `(Var(P d) - alpha2 Var(d)) / |d|` seen.
    pub lasota_yorke_max_ratio: f64,
    pub lasota_yorke_c: f64,
}

impl BvSuiteReport {
    pub fn total_violations(&self) -> usize {
        self.abs_violations
            + self.two_norm_violations
            + self.lipschitz_violations
            + self.seminorm_violations
            + self.lasota_yorke_violations
    }
}

const REL_TOL: f64 = 1e-12;

/// Checks every inequality on `random_suite(n, seed)`, using `c` as the
/// Lasota–Yorke constant.
pub fn check_suite(n: usize, seed: u64, c: f64) -> BvSuiteReport {
    let suite = random_suite(n, seed);
    let zigzag = SiteMap::zigzag3();
    let mut rep = BvSuiteReport {
        n,
        lasota_yorke_max_ratio: f64::NEG_INFINITY,
        lasota_yorke_c: c,
        ..Default::default()
    };
    let le = |a: f64, b: f64| a <= b + REL_TOL * b.abs().max(1.0);
    for (i, d) in suite.iter().enumerate() {
        let var = variation(d);
        let mass = total_mass_norm(d);
        rep.abs_violations += !le(variation(&absolute_value(d)), var) as usize;
        rep.two_norm_violations += !le(mass, 0.5 * var) as usize;

        let mut rng = rng::stream(seed, Domain::Probe, (n + i) as u64);
        let (a, b, w) = (
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(0.5..20.0),
        );
        let u: Vec<f64> = (0..d.cells()).map(|j| a + b * (w * d.center(j)).sin()).collect();
        let (ud, bound) = lipschitz_multiply(d, &u, b.abs() * w);
        rep.lipschitz_violations += !le(variation(&ud), bound) as usize;

        let scale = Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mut scaled = d.clone();
        scaled.values_mut().iter_mut().for_each(|v| *v *= scale);
        let homogeneous = (variation(&scaled) - scale.norm() * var).abs() <= 1e-10 * var.max(1.0);
        let other = &suite[(i + 1) % suite.len()];
        let triangle = if other.cells() == d.cells() {
            let mut sum = d.clone();
            sum.values_mut()
                .iter_mut()
                .zip(other.values())
                .for_each(|(v, o)| *v += o);
            le(variation(&sum), var + variation(other))
        } else {
            true
        };
        rep.seminorm_violations += !(homogeneous && triangle) as usize;

        let ratio = lasota_yorke_ratio(&zigzag, d, LASOTA_YORKE_ALPHA2).expect("suite grids are aligned");
        rep.lasota_yorke_max_ratio = rep.lasota_yorke_max_ratio.max(ratio);
        rep.lasota_yorke_violations += (ratio * mass > c * mass + REL_TOL * var.max(1.0)) as usize;
    }
    rep
}
