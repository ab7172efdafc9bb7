//! Ulam discretizations of the lattice transfer operator restricted to a
//! window of `k` sites, their twisted versions `P_t = P(e^{itf} ·)` and the
//! spectral quantities derived from them.
//!
//! Operators act on vectors of cell masses: entry `P[i][j]` is the fraction of
//! the mass of cell `j` that lands in cell `i`, so untwisted operators are
//! column stochastic. Product cells are indexed with site 0 fastest,
//! `index = c_0 + N c_1 + N^2 c_2`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::ops::{AddAssign, Mul};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleRun;
use crate::error::{Error, Result};
use crate::exec;
use crate::lattice::{Coupling, LatticeConfig};
use crate::observable::Observable;
use crate::rng::{self, Domain};
use crate::sitemap::{transfer_apply, PCDensity};
use crate::stats::{self, LinearFit};

pub const MIN_SAMPLES_PER_CELL: usize = 10;
pub const DEFAULT_FD_STEP: f64 = 1.0 / 64.0;
const MAX_POWER_ITERATIONS: usize = 100_000;

/// Scalars a sparse operator can act on.
pub trait Scalar: Copy + Send + Sync + Default + AddAssign + Mul<f64, Output = Self> {}
impl Scalar for f64 {}
impl Scalar for Complex64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildMethod {
    Exact,
    MonteCarlo,
    /// Assembled directly from matrix entries.
    Explicit,
}

/// Sparse Ulam matrix, stored by columns with a row-major copy for parallel
/// products.
#[derive(Debug, Clone)]
pub struct UlamOperator {
    k: usize,
    cells_per_site: usize,
    dim: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    col_vals: Vec<f64>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    row_vals: Vec<f64>,
    method: BuildMethod,
    samples_per_cell: Option<usize>,
    /// Lattice indices of the modeled sites.
    window: Vec<usize>,
    /// Number of sites of the lattice the window lives in.
    lattice_sites: usize,
}

impl UlamOperator {
    /// Assembles a `dim x dim` operator from `(row, col, value)` triplets;
    /// duplicates are summed. The operator models `k` sites with `cells_per_site`
    /// cells each, so `dim = cells_per_site^k`.
    pub fn from_triplets(
        k: usize,
        cells_per_site: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let dim = cells_per_site.pow(k as u32);
        let mut cols: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); dim];
        for (i, j, v) in triplets {
            if i >= dim || j >= dim {
                return Err(Error::InvalidConfig(format!(
                    "entry ({i}, {j}) outside a {dim}x{dim} matrix"
                )));
            }
            *cols[j].entry(i).or_insert(0.0) += v;
        }
        let columns = cols.into_iter().map(|c| c.into_iter().collect()).collect();
        Ok(Self::from_columns(
            k,
            cells_per_site,
            columns,
            BuildMethod::Explicit,
            None,
        ))
    }

    /// Dense row-major matrix, mainly for tests and synthetic operators.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let trip = rows.iter().enumerate().flat_map(|(i, r)| {
            r.iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(move |(j, &v)| (i, j, v))
        });
        Self::from_triplets(1, n, trip)
    }

    fn from_columns(
        k: usize,
        cells_per_site: usize,
        columns: Vec<Vec<(usize, f64)>>,
        method: BuildMethod,
        samples_per_cell: Option<usize>,
    ) -> Self {
        let dim = columns.len();
        let mut col_ptr = Vec::with_capacity(dim + 1);
        let mut row_idx = Vec::new();
        let mut col_vals = Vec::new();
        col_ptr.push(0);
        for c in &columns {
            for &(i, v) in c {
                row_idx.push(i);
                col_vals.push(v);
            }
            col_ptr.push(row_idx.len());
        }
        // transpose into rows
        let mut counts = vec![0usize; dim + 1];
        for &i in &row_idx {
            counts[i + 1] += 1;
        }
        for i in 0..dim {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut fill = counts;
        let mut col_idx = vec![0; row_idx.len()];
        let mut row_vals = vec![0.0; row_idx.len()];
        for j in 0..dim {
            for p in col_ptr[j]..col_ptr[j + 1] {
                let i = row_idx[p];
                col_idx[fill[i]] = j;
                row_vals[fill[i]] = col_vals[p];
                fill[i] += 1;
            }
        }
        UlamOperator {
            k,
            cells_per_site,
            dim,
            col_ptr,
            row_idx,
            col_vals,
            row_ptr,
            col_idx,
            row_vals,
            method,
            samples_per_cell,
            window: (0..k).collect(),
            lattice_sites: k,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cells_per_site(&self) -> usize {
        self.cells_per_site
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.col_vals.len()
    }

    pub fn method(&self) -> BuildMethod {
        self.method
    }

    pub fn samples_per_cell(&self) -> Option<usize> {
        self.samples_per_cell
    }

    /// Lattice indices of the modeled sites.
    pub fn window(&self) -> &[usize] {
        &self.window
    }

    /// Nonzeros of column `j` as `(row, value)`.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.col_ptr[j]..self.col_ptr[j + 1]).map(move |p| (self.row_idx[p], self.col_vals[p]))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.column(j).find(|e| e.0 == i).map_or(0.0, |e| e.1)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.dim).map(|j| self.column(j).map(|e| e.1).sum()).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.dim]; self.dim];
        for j in 0..self.dim {
            for (i, v) in self.column(j) {
                m[i][j] = v;
            }
        }
        m
    }

    /// `y = P x`, parallel over rows.
    pub fn apply<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::default(); self.dim];
        exec::fill_indexed(&mut y, |i| {
            let mut acc = T::default();
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += x[self.col_idx[p]] * self.row_vals[p];
            }
            acc
        });
        y
    }

    /// `y = P^T x`, parallel over columns.
    pub fn apply_transpose<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::default(); self.dim];
        exec::fill_indexed(&mut y, |j| {
            let mut acc = T::default();
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                acc += x[self.row_idx[p]] * self.col_vals[p];
            }
            acc
        });
        y
    }

    /// Per-site cell indices of product cell `index`.
    pub fn cell_coords(&self, mut index: usize) -> Vec<usize> {
        (0..self.k)
            .map(|_| {
                let c = index % self.cells_per_site;
                index /= self.cells_per_site;
                c
            })
            .collect()
    }

    /// Values of `f` at the cell centers. Fails if `f` reads an unmodeled site.
    pub fn cell_values(&self, f: &Observable) -> Result<Vec<f64>> {
        if let Some(&p) = f.support().iter().find(|p| !self.window.contains(p)) {
            return Err(Error::Support(p));
        }
        let n = self.cells_per_site as f64;
        let mut sites = vec![0.0; self.lattice_sites];
        Ok((0..self.dim)
            .map(|j| {
                for (m, c) in self.cell_coords(j).into_iter().enumerate() {
                    sites[self.window[m]] = (c as f64 + 0.5) / n;
                }
                f.eval(&sites)
            })
            .collect())
    }

    /// `f` shifted so that its average against the stationary density vanishes.
    pub fn center_observable(&self, f: &Observable, tol: f64) -> Result<Observable> {
        let pi = stationary_density(self, tol)?;
        let vals = self.cell_values(f)?;
        let mean: f64 = pi.iter().zip(&vals).map(|(p, v)| p * v).sum();
        Ok(f.clone().with_offset(f.offset() + mean))
    }

    /// Matrix Market coordinate format (1-based indices).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(
            w,
            "% Ulam operator: k={} N={} method={:?}",
            self.k, self.cells_per_site, self.method
        )?;
        writeln!(w, "{} {} {}", self.dim, self.dim, self.nnz())?;
        for j in 0..self.dim {
            for (i, v) in self.column(j) {
                writeln!(w, "{} {} {:e}", i + 1, j + 1, v)?;
            }
        }
        Ok(())
    }

    /// Reads a square coordinate Matrix Market file written by
    /// [`write_matrix_market`](Self::write_matrix_market).
    pub fn read_matrix_market<R: BufRead>(r: R, k: usize) -> Result<Self> {
        let bad = |m: &str| Error::InvalidConfig(format!("matrix market: {m}"));
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty input"))??;
        if !header.starts_with("%%MatrixMarket matrix coordinate real general") {
            return Err(bad("unsupported header"));
        }
        let mut size = None;
        let mut trip = Vec::new();
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('%') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if size.is_none() {
                let n: usize = parts
                    .first()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("size line"))?;
                size = Some(n);
                continue;
            }
            if parts.len() != 3 {
                return Err(bad("entry line"));
            }
            let i: usize = parts[0].parse().map_err(|_| bad("row index"))?;
            let j: usize = parts[1].parse().map_err(|_| bad("column index"))?;
            let v: f64 = parts[2].parse().map_err(|_| bad("value"))?;
            trip.push((i - 1, j - 1, v));
        }
        let n = size.ok_or_else(|| bad("missing size line"))?;
        let cells = (n as f64).powf(1.0 / k as f64).round() as usize;
        if cells.pow(k as u32) != n {
            return Err(bad("dimension is not a k-th power"));
        }
        Self::from_triplets(k, cells, trip)
    }
}

/// How to build an Ulam operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UlamBuild {
    /// Exact transition masses; needs `eps = 0`, a piecewise-linear map and an
    /// aligned grid.
    Exact,
    /// `samples_per_cell` uniform points per product cell; sites outside the
    /// window are redrawn from Lebesgue measure for every sample.
    MonteCarlo { samples_per_cell: usize, seed: u64 },
}

/// Builds the Ulam operator of `cfg` on the window of sites
/// `(0,..,0), (1,0,..,0), ..., (k-1,0,..,0)` with `n` cells per site.
pub fn build_ulam(cfg: &LatticeConfig, k: usize, n: usize, how: UlamBuild) -> Result<UlamOperator> {
    if !(1..=3).contains(&k) {
        return Err(Error::InvalidConfig(format!("k = {k} must be 1, 2 or 3")));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one cell per site".into()));
    }
    let torus = cfg.torus();
    let window: Vec<usize> = (0..k)
        .map(|m| {
            let mut c = vec![0i64; torus.dim()];
            c[0] = m as i64;
            torus.index(&c)
        })
        .collect();
    let mut op = match how {
        UlamBuild::Exact => build_exact(cfg, k, n)?,
        UlamBuild::MonteCarlo { samples_per_cell, seed } => {
            build_monte_carlo(cfg, k, n, &window, samples_per_cell, seed)?
        }
    };
    op.window = window;
    op.lattice_sites = cfg.n_sites();
    Ok(op)
}

fn build_exact(cfg: &LatticeConfig, k: usize, n: usize) -> Result<UlamOperator> {
    if cfg.eps() != 0.0 || !matches!(cfg.coupling(), Coupling::Diffusive) {
        return Err(Error::InvalidConfig(
            "exact Ulam matrices need the uncoupled (eps = 0) diffusive lattice".into(),
        ));
    }
    let map = cfg.map();
    let mut single: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let width = 1.0 / n as f64;
    for j in 0..n {
        let mut vals = vec![Complex64::new(0.0, 0.0); n];
        vals[j] = Complex64::new(1.0 / width, 0.0);
        let image = transfer_apply(map, &PCDensity::on_uniform(vals))?;
        single.push(
            image
                .values()
                .iter()
                .enumerate()
                .filter(|(_, v)| v.re != 0.0)
                .map(|(i, v)| (i, v.re * image.width(i)))
                .collect(),
        );
    }
    // k-fold Kronecker power, site 0 fastest
    let mut columns = single.clone();
    for _ in 1..k {
        let inner = columns;
        let inner_dim = inner.len();
        let mut next = Vec::with_capacity(inner_dim * n);
        for outer_col in &single {
            for inner_col in &inner {
                let mut col: Vec<(usize, f64)> = Vec::with_capacity(outer_col.len() * inner_col.len());
                for &(io, vo) in outer_col {
                    for &(ii, vi) in inner_col {
                        col.push((io * inner_dim + ii, vo * vi));
                    }
                }
                col.sort_unstable_by_key(|e| e.0);
                next.push(col);
            }
        }
        columns = next;
    }
    Ok(UlamOperator::from_columns(k, n, columns, BuildMethod::Exact, None))
}

fn build_monte_carlo(
    cfg: &LatticeConfig,
    k: usize,
    n: usize,
    window: &[usize],
    samples: usize,
    seed: u64,
) -> Result<UlamOperator> {
    if samples < MIN_SAMPLES_PER_CELL {
        return Err(Error::SampleCount {
            min: MIN_SAMPLES_PER_CELL,
            got: samples,
        });
    }
    if cfg.side() < 2 * cfg.range() + k {
        return Err(Error::InvalidConfig(format!(
            "window of {k} sites needs L >= 2r + k = {}, got {}",
            2 * cfg.range() + k,
            cfg.side()
        )));
    }
    let torus = cfg.torus();
    let r = cfg.range();
    // unmodeled sites that the window's images read
    let mut bath: Vec<usize> = window
        .iter()
        .flat_map(|&p| torus.ball(p, r))
        .filter(|q| !window.contains(q))
        .collect();
    bath.sort_unstable();
    bath.dedup();

    let dim = n.pow(k as u32);
    let nf = n as f64;
    let inv = 1.0 / samples as f64;
    let columns = exec::map_range(dim, |j| {
        let mut rng = rng::stream(seed, Domain::UlamCell, j as u64);
        let mut coords = Vec::with_capacity(k);
        let mut idx = j;
        for _ in 0..k {
            coords.push(idx % n);
            idx /= n;
        }
        let mut x = vec![0.0; cfg.n_sites()];
        let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
        for _ in 0..samples {
            for &q in &bath {
                x[q] = rng.random();
            }
            for (m, &p) in window.iter().enumerate() {
                x[p] = (coords[m] as f64 + rng.random::<f64>()) / nf;
            }
            let mut dest = 0;
            for &p in window.iter().rev() {
                let y = cfg.site_image(p, &|q| x[q]);
                let c = ((y * nf) as usize).min(n - 1);
                dest = dest * n + c;
            }
            *hits.entry(dest).or_insert(0) += 1;
        }
        hits.into_iter().map(|(i, c)| (i, c as f64 * inv)).collect::<Vec<_>>()
    });
    Ok(UlamOperator::from_columns(
        k,
        n,
        columns,
        BuildMethod::MonteCarlo,
        Some(samples),
    ))
}

/// Fixed mass vector of `op` by power iteration from the uniform vector.
pub fn stationary_density(op: &UlamOperator, tol: f64) -> Result<Vec<f64>> {
    stationary_density_from(op, vec![1.0; op.dim()], tol)
}

/// Power iteration from `start` (normalized to unit mass); the residual is
/// the l1 norm of `P v - v`. Tolerances below the rounding floor of the
/// dimension are raised to it.
pub fn stationary_density_from(op: &UlamOperator, start: Vec<f64>, tol: f64) -> Result<Vec<f64>> {
    let normalize = |v: &mut Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
    };
    let mut v = start;
    normalize(&mut v);
    // rounding floor of an l1 residual
    let tol = tol.max(4.0 * f64::EPSILON * v.len() as f64);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_POWER_ITERATIONS {
        let mut w = op.apply(&v);
        normalize(&mut w);
        residual = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = w;
        if residual <= tol {
            return Ok(v);
        }
    }
    Err(Error::NonConvergence {
        what: "stationary density",
        iterations: MAX_POWER_ITERATIONS,
        residual,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpectralGap {
    pub lambda2_modulus: f64,
    pub gap: f64,
    pub iterations: usize,
}

/// Below this growth of the deflated block the operator is treated as
/// nilpotent on the complement of `pi`.
const COLLAPSE: f64 = 1e-10;

/// `|lambda_2|` of an untwisted operator by block power iteration with two
/// vectors on `P - pi 1^T`, reading the modulus from the Rayleigh–Ritz values
/// of the block (which handles complex and equal-modulus pairs). Stops when
/// the estimate changes by less than `tol` relative.
pub fn spectral_gap(op: &UlamOperator, tol: f64) -> Result<SpectralGap> {
    let pi = stationary_density(op, 1e-12)?;
    let deflate = |v: &mut [f64]| {
        let m: f64 = v.iter().sum();
        v.iter_mut().zip(&pi).for_each(|(x, p)| *x -= m * p);
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut rng = rng::stream(0, Domain::Power, 0);
    let mut fresh = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let mut v: Vec<f64> = (0..op.dim()).map(|_| rng.random::<f64>() - 0.5).collect();
        deflate(&mut v);
        v
    };
    // Gram–Schmidt; a column that vanishes is replaced by a fresh direction
    let orthonormalize = |block: &mut [Vec<f64>; 2],
                          rng: &mut rand_chacha::ChaCha8Rng,
                          fresh: &mut dyn FnMut(&mut rand_chacha::ChaCha8Rng) -> Vec<f64>| {
        for c in 0..2 {
            for _attempt in 0..3 {
                if c == 1 {
                    let (head, tail) = block.split_at_mut(1);
                    let proj = dot(&head[0], &tail[0]);
                    tail[0].iter_mut().zip(&head[0]).for_each(|(x, y)| *x -= proj * y);
                }
                let n = dot(&block[c], &block[c]).sqrt();
                if n > 1e-150 {
                    block[c].iter_mut().for_each(|x| *x /= n);
                    break;
                }
                block[c] = fresh(rng);
            }
        }
    };
    let mut block = [fresh(&mut rng), fresh(&mut rng)];
    orthonormalize(&mut block, &mut rng, &mut fresh);
    let mut previous = f64::INFINITY;
    for iterations in 1..=MAX_POWER_ITERATIONS {
        let mut w = [op.apply(&block[0]), op.apply(&block[1])];
        w.iter_mut().for_each(|c| deflate(c));
        let growth = ((dot(&w[0], &w[0]) + dot(&w[1], &w[1])) / 2.0).sqrt();
        if growth < COLLAPSE {
            return Ok(SpectralGap {
                lambda2_modulus: growth,
                gap: 1.0 - growth,
                iterations,
            });
        }
        let h = [
            [dot(&block[0], &w[0]), dot(&block[0], &w[1])],
            [dot(&block[1], &w[0]), dot(&block[1], &w[1])],
        ];
        let half_trace = 0.5 * (h[0][0] + h[1][1]);
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let disc = half_trace * half_trace - det;
        let estimate = if disc >= 0.0 {
            half_trace.abs() + disc.sqrt()
        } else {
            det.abs().sqrt()
        };
        if (estimate - previous).abs() <= tol * estimate {
            return Ok(SpectralGap {
                lambda2_modulus: estimate,
                gap: 1.0 - estimate,
                iterations,
            });
        }
        previous = estimate;
        block = w;
        orthonormalize(&mut block, &mut rng, &mut fresh);
    }
    Err(Error::NonConvergence {
        what: "spectral gap",
        iterations: MAX_POWER_ITERATIONS,
        residual: f64::NAN,
    })
}

/// `P_t = P ∘ diag(e^{i t f(cell centers)})`.
#[derive(Debug, Clone)]
pub struct TwistedOperator<'a> {
    base: &'a UlamOperator,
    t: f64,
    phases: Vec<Complex64>,
}

impl<'a> TwistedOperator<'a> {
    pub fn from_cell_values(base: &'a UlamOperator, values: &[f64], t: f64) -> Self {
        TwistedOperator {
            base,
            t,
            phases: values.iter().map(|&f| Complex64::new(0.0, t * f).exp()).collect(),
        }
    }

    pub fn base(&self) -> &UlamOperator {
        self.base
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn phases(&self) -> &[Complex64] {
        &self.phases
    }

    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let y: Vec<Complex64> = x.iter().zip(&self.phases).map(|(a, p)| a * p).collect();
        self.base.apply(&y)
    }

    /// `P_t^T x`, used for left eigenvectors.
    pub fn apply_transpose(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = self.base.apply_transpose(x);
        y.iter_mut().zip(&self.phases).for_each(|(a, p)| *a *= p);
        y
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.phases[j] * self.base.get(i, j)
    }

    pub fn to_dense(&self) -> Vec<Vec<Complex64>> {
        let d = self.base.dim();
        let mut m = vec![vec![Complex64::new(0.0, 0.0); d]; d];
        for (j, p) in self.phases.iter().enumerate() {
            for (i, v) in self.base.column(j) {
                m[i][j] = p * v;
            }
        }
        m
    }
}

pub fn twist<'a>(op: &'a UlamOperator, f: &Observable, t: f64) -> Result<TwistedOperator<'a>> {
    Ok(TwistedOperator::from_cell_values(op, &op.cell_values(f)?, t))
}

fn cnorm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn cdot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Dominant eigenpair by power iteration with Rayleigh-quotient eigenvalue;
/// the returned vector has unit l2 norm.
fn power_iteration(
    apply: impl Fn(&[Complex64]) -> Vec<Complex64>,
    start: Vec<Complex64>,
    tol: f64,
    what: &'static str,
) -> Result<(Complex64, Vec<Complex64>)> {
    let mut v = start;
    // rounding floor of an l2 residual
    let tol = tol.max(64.0 * f64::EPSILON * (v.len() as f64).sqrt());
    let n0 = cnorm(&v);
    v.iter_mut().for_each(|z| *z /= n0);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_POWER_ITERATIONS {
        let w = apply(&v);
        let lambda = cdot(&v, &w);
        residual = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - lambda * b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let nw = cnorm(&w);
        if nw == 0.0 {
            return Ok((Complex64::new(0.0, 0.0), v));
        }
        if residual <= tol * lambda.norm().max(1e-300) {
            return Ok((lambda, v));
        }
        v = w.into_iter().map(|z| z / nw).collect();
    }
    Err(Error::NonConvergence {
        what,
        iterations: MAX_POWER_ITERATIONS,
        residual,
    })
}

/// Leading eigenvalue of `P_t` with right eigenvector, warm-started from `start`.
pub fn leading_eigen(op: &TwistedOperator<'_>, start: Vec<Complex64>, tol: f64) -> Result<(Complex64, Vec<Complex64>)> {
    power_iteration(|v| op.apply(v), start, tol, "leading eigenvalue")
}

/// Leading left eigenvector `l` with `l^T P_t = lambda l^T`.
pub fn leading_left_eigen(
    op: &TwistedOperator<'_>,
    start: Vec<Complex64>,
    tol: f64,
) -> Result<(Complex64, Vec<Complex64>)> {
    power_iteration(|v| op.apply_transpose(v), start, tol, "left eigenvector")
}

/// Leading eigenvalue curve `t -> lambda(t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenCurve {
    pub t: Vec<f64>,
    pub lambda: Vec<Complex64>,
    /// `|<v(t_prev), v(t)>|` with the neighbor closer to 0.
    pub overlap: Vec<f64>,
    pub radius: Vec<f64>,
    /// Finite-difference step for the derivatives at 0.
    pub h: f64,
    /// `lambda'(0)`, central differences with Richardson extrapolation.
    pub dlambda0: Complex64,
    /// `lambda''(0)`, central differences with Richardson extrapolation.
    pub d2lambda0: Complex64,
    /// `-Re lambda''(0)`.
    pub sigma2: f64,
}

impl EigenCurve {
    /// CSV columns `t,re,im,abs,radius`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,re,im,abs,radius")?;
        for (i, t) in self.t.iter().enumerate() {
            let l = self.lambda[i];
            writeln!(w, "{t},{},{},{},{}", l.re, l.im, l.norm(), self.radius[i])?;
        }
        Ok(())
    }

    pub fn lambda_at(&self, t: f64) -> Option<Complex64> {
        self.t
            .iter()
            .position(|&s| (s - t).abs() < 1e-14)
            .map(|i| self.lambda[i])
    }
}

const MIN_OVERLAP: f64 = 0.9;

/// Tracks the leading eigenvalue of `P_t` along `t_grid` (which must contain 0),
/// warm-starting each `t` from the eigenvector of its neighbor closer to 0.
pub fn lambda_curve(op: &UlamOperator, f: &Observable, t_grid: &[f64], h: f64, tol: f64) -> Result<EigenCurve> {
    if !t_grid.contains(&0.0) {
        return Err(Error::InvalidConfig("t grid must contain 0".into()));
    }
    let values = op.cell_values(f)?;
    let pi = stationary_density(op, 1e-12)?;
    let start: Vec<Complex64> = pi.iter().map(|&p| Complex64::new(p, 0.0)).collect();

    let solve = |t: f64, start: Vec<Complex64>| -> Result<(Complex64, Vec<Complex64>)> {
        let tw = TwistedOperator::from_cell_values(op, &values, t);
        leading_eigen(&tw, start, tol)
    };
    let (l0, v0) = solve(0.0, start)?;

    let mut order: Vec<usize> = (0..t_grid.len()).collect();
    order.sort_by(|&a, &b| t_grid[a].total_cmp(&t_grid[b]));
    let mut lambda = vec![Complex64::new(0.0, 0.0); t_grid.len()];
    let mut overlap = vec![1.0; t_grid.len()];
    let zero_pos = order.iter().position(|&i| t_grid[i] == 0.0).unwrap();
    lambda[order[zero_pos]] = l0;
    // sweep outwards from 0 in both directions
    for side in [1i64, -1] {
        let mut prev = v0.clone();
        let mut pos = zero_pos as i64 + side;
        while pos >= 0 && (pos as usize) < order.len() {
            let i = order[pos as usize];
            let t = t_grid[i];
            let (l, v) = solve(t, prev.clone())?;
            let ov = cdot(&prev, &v).norm();
            if ov < MIN_OVERLAP {
                return Err(Error::BranchTracking { t, overlap: ov });
            }
            lambda[i] = l;
            overlap[i] = ov;
            prev = v;
            pos += side;
        }
    }

    let at = |t: f64| solve(t, v0.clone()).map(|r| r.0);
    let (lp1, lm1, lp2, lm2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
    let d1 = |p: Complex64, m: Complex64, s: f64| (p - m) / (2.0 * s);
    let d2 = |p: Complex64, m: Complex64, s: f64| (p - l0 * 2.0 + m) / (s * s);
    let dlambda0 = (d1(lp1, lm1, h) * 4.0 - d1(lp2, lm2, 2.0 * h)) / 3.0;
    let d2lambda0 = (d2(lp1, lm1, h) * 4.0 - d2(lp2, lm2, 2.0 * h)) / 3.0;

    Ok(EigenCurve {
        t: t_grid.to_vec(),
        radius: lambda.iter().map(|l| l.norm()).collect(),
        lambda,
        overlap,
        h,
        dlambda0,
        d2lambda0,
        sigma2: -d2lambda0.re,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadiusEstimate {
    pub t: f64,
    /// Maximum over the random starts.
    pub radius: f64,
    pub per_start: Vec<f64>,
}

pub const RADIUS_STARTS: usize = 3;

/// Spectral radius of `P_t` from the growth of `|P_t^m v|` over `n_power`
/// steps; the rate is read on the second half of the iterations, and the
/// maximum over three random starts is reported.
pub fn spectral_radius_map(
    op: &UlamOperator,
    f: &Observable,
    t_grid: &[f64],
    n_power: usize,
    seed: u64,
) -> Result<Vec<RadiusEstimate>> {
    let values = op.cell_values(f)?;
    let n_power = n_power.max(2);
    let tail = n_power - n_power / 2;
    Ok(t_grid
        .iter()
        .map(|&t| {
            let tw = TwistedOperator::from_cell_values(op, &values, t);
            let per_start: Vec<f64> = (0..RADIUS_STARTS)
                .map(|s| {
                    let mut rng = rng::stream(seed, Domain::Power, s as u64);
                    let mut v: Vec<Complex64> = (0..op.dim())
                        .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                        .collect();
                    let mut log_growth = 0.0;
                    for m in 0..n_power {
                        let nv = cnorm(&v);
                        if nv == 0.0 {
                            return 0.0;
                        }
                        v.iter_mut().for_each(|z| *z /= nv);
                        v = tw.apply(&v);
                        if m >= n_power - tail {
                            log_growth += cnorm(&v).ln();
                        }
                    }
                    (log_growth / tail as f64).exp()
                })
                .collect();
            RadiusEstimate {
                t,
                radius: per_start.iter().copied().fold(0.0, f64::max),
                per_start,
            }
        })
        .collect())
}

/// Empirical characteristic function of `S_n f` against `lambda(t)^n w(t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharFnReport {
    pub t: f64,
    pub lambda: Complex64,
    /// Mass of the initial density projected on the leading eigendirection.
    pub w: Complex64,
    pub n: Vec<usize>,
    pub empirical: Vec<Complex64>,
    pub predicted: Vec<Complex64>,
    /// `|empirical - predicted|`.
    pub mismatch: Vec<f64>,
    /// `|1^T P_t^n h - predicted|`: remainder of the Ulam model itself.
    pub model_remainder: Vec<f64>,
    /// `1 / sqrt(n_traj)`.
    pub noise_floor: f64,
    /// Leading horizons whose mismatch exceeds three noise floors.
    pub pre_floor: usize,
    /// Fit of `ln(mismatch)` against `n` on the pre-floor range.
    pub fit: Option<LinearFit>,
}

impl CharFnReport {
    /// Geometric decay on at least three pre-floor points with `R^2 >= 0.9`.
    pub fn decays_geometrically(&self) -> bool {
        self.pre_floor >= 3 && self.fit.is_some_and(|f| f.slope < 0.0 && f.r_squared >= 0.9)
    }
}

const FLOOR_FACTOR: f64 = 3.0;

pub fn char_fn_check(
    op: &UlamOperator,
    f: &Observable,
    t: f64,
    n_list: &[usize],
    run: &EnsembleRun,
    tol: f64,
) -> Result<CharFnReport> {
    let values = op.cell_values(f)?;
    let tw = TwistedOperator::from_cell_values(op, &values, t);
    let h: Vec<Complex64> = stationary_density(op, 1e-12)?
        .into_iter()
        .map(|p| Complex64::new(p, 0.0))
        .collect();
    let (lambda, right) = leading_eigen(&tw, h.clone(), tol)?;
    let ones = vec![Complex64::new(1.0, 0.0); op.dim()];
    let (_, left) = leading_left_eigen(&tw, ones, tol)?;
    let dot = |a: &[Complex64], b: &[Complex64]| -> Complex64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let w = dot(&left, &h) * right.iter().sum::<Complex64>() / dot(&left, &right);

    let mut empirical = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let xs = run
            .samples_at(n)
            .ok_or_else(|| Error::InvalidConfig(format!("ensemble has no partial sums at n = {n}")))?;
        let sum: Complex64 = xs.iter().map(|&s| Complex64::new(0.0, t * s).exp()).sum();
        empirical.push(sum / xs.len() as f64);
    }
    let predicted: Vec<Complex64> = n_list.iter().map(|&n| lambda.powu(n as u32) * w).collect();
    let mismatch: Vec<f64> = empirical.iter().zip(&predicted).map(|(e, p)| (e - p).norm()).collect();

    let mut model_remainder = Vec::with_capacity(n_list.len());
    let mut v = h;
    let mut steps = 0;
    for (idx, &n) in n_list.iter().enumerate() {
        while steps < n {
            v = tw.apply(&v);
            steps += 1;
        }
        model_remainder.push((v.iter().sum::<Complex64>() - predicted[idx]).norm());
    }

    let noise_floor = 1.0 / (run.n_traj as f64).sqrt();
    let pre_floor = mismatch.iter().take_while(|&&m| m > FLOOR_FACTOR * noise_floor).count();
    let fit = (pre_floor >= 2).then(|| {
        let x: Vec<f64> = n_list[..pre_floor].iter().map(|&n| n as f64).collect();
        let y: Vec<f64> = mismatch[..pre_floor].iter().map(|m| m.ln()).collect();
        stats::linear_fit(&x, &y)
    });
    Ok(CharFnReport {
        t,
        lambda,
        w,
        n: n_list.to_vec(),
        empirical,
        predicted,
        mismatch,
        model_remainder,
        noise_floor,
        pre_floor,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sitemap::SiteMap;
    use approx::assert_abs_diff_eq;

    fn uncoupled(l: usize) -> LatticeConfig {
        LatticeConfig::diffusive(l, SiteMap::zigzag3(), 0.0).unwrap()
    }

    #[test]
    fn exact_zigzag3_columns() {
        let op = build_ulam(&uncoupled(3), 1, 27, UlamBuild::Exact).unwrap();
        for j in 0..27 {
            let col: Vec<_> = op.column(j).collect();
            assert_eq!(col.len(), 3, "column {j}");
            for (_, v) in col {
                assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn single_cell_is_identity_mass() {
        let op = build_ulam(&uncoupled(3), 1, 1, UlamBuild::Exact).unwrap();
        assert_eq!(op.to_dense(), vec![vec![1.0]]);
        let mc = build_ulam(
            &uncoupled(3),
            1,
            1,
            UlamBuild::MonteCarlo {
                samples_per_cell: 10,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(mc.to_dense(), vec![vec![1.0]]);
    }

    #[test]
    fn build_errors() {
        let c = uncoupled(3);
        let skew = SiteMap::piecewise_linear(&[(0.0, 0.0), (0.3, 1.0), (0.6, 0.0), (1.0, 1.0)]).unwrap();
        let skewed = LatticeConfig::diffusive(3, skew, 0.0).unwrap();
        assert!(matches!(
            build_ulam(&skewed, 1, 10, UlamBuild::Exact),
            Err(Error::Alignment(_))
        ));
        assert!(build_ulam(&c, 4, 3, UlamBuild::Exact).is_err());
        assert!(matches!(
            build_ulam(
                &c,
                1,
                9,
                UlamBuild::MonteCarlo {
                    samples_per_cell: 9,
                    seed: 0
                }
            ),
            Err(Error::SampleCount { .. })
        ));
        // window of 2 sites with r = 1 needs L >= 4
        assert!(build_ulam(
            &c,
            2,
            9,
            UlamBuild::MonteCarlo {
                samples_per_cell: 10,
                seed: 0
            }
        )
        .is_err());
        let coupled = LatticeConfig::diffusive(5, SiteMap::zigzag3(), 0.02).unwrap();
        assert!(build_ulam(&coupled, 1, 9, UlamBuild::Exact).is_err());
    }

    #[test]
    fn kronecker_structure_for_two_sites() {
        let one = build_ulam(&uncoupled(4), 1, 9, UlamBuild::Exact).unwrap();
        let two = build_ulam(&uncoupled(4), 2, 9, UlamBuild::Exact).unwrap();
        assert_eq!(two.dim(), 81);
        for (i0, i1, j0, j1) in [(0, 1, 0, 0), (3, 4, 1, 2), (8, 0, 5, 6)] {
            assert_abs_diff_eq!(
                two.get(i0 + 9 * i1, j0 + 9 * j1),
                one.get(i0, j0) * one.get(i1, j1),
                epsilon = 1e-15
            );
        }
        for s in two.column_sums() {
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn monte_carlo_matches_exact_when_uncoupled() {
        let c = uncoupled(5);
        let samples = 4000;
        for n in [9, 27] {
            let ex = build_ulam(&c, 1, n, UlamBuild::Exact).unwrap();
            let mc = build_ulam(
                &c,
                1,
                n,
                UlamBuild::MonteCarlo {
                    samples_per_cell: samples,
                    seed: 3,
                },
            )
            .unwrap();
            let (a, b) = (ex.to_dense(), mc.to_dense());
            let diff = a
                .iter()
                .flatten()
                .zip(b.iter().flatten())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 3.0 / (samples as f64).sqrt(), "N = {n}: {diff}");
            for s in mc.column_sums() {
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn monte_carlo_build_ignores_worker_count() {
        let c = LatticeConfig::diffusive(6, SiteMap::zigzag3(), 0.02).unwrap();
        let how = UlamBuild::MonteCarlo {
            samples_per_cell: 200,
            seed: 8,
        };
        let a = exec::with_workers(1, || build_ulam(&c, 2, 9, how).unwrap());
        let b = exec::with_workers(4, || build_ulam(&c, 2, 9, how).unwrap());
        assert_eq!(a.to_dense(), b.to_dense());
    }

    #[test]
    fn stationary_density_of_zigzag3_is_uniform() {
        let op = build_ulam(&uncoupled(3), 1, 27, UlamBuild::Exact).unwrap();
        let pi = stationary_density(&op, 1e-12).unwrap();
        for p in &pi {
            assert_abs_diff_eq!(*p, 1.0 / 27.0, epsilon = 1e-14);
        }
        let id = UlamOperator::from_dense(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = stationary_density_from(&id, vec![3.0, 1.0], 1e-12).unwrap();
        assert_eq!(v, vec![0.75, 0.25]);
    }

    #[test]
    fn periodic_chain_does_not_converge() {
        let swap = UlamOperator::from_dense(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            stationary_density_from(&swap, vec![1.0, 0.0], 1e-12),
            Err(Error::NonConvergence { .. })
        ));
    }

    #[test]
    fn rank_one_operator_has_no_second_eigenvalue() {
        let col = [0.1, 0.2, 0.3, 0.4];
        let rows: Vec<Vec<f64>> = col.iter().map(|&c| vec![c; 4]).collect();
        let op = UlamOperator::from_dense(&rows).unwrap();
        let g = spectral_gap(&op, 1e-8).unwrap();
        assert!(g.lambda2_modulus < 1e-12, "{g:?}");
    }

    #[test]
    fn twist_at_zero_is_base() {
        let c = uncoupled(3);
        let op = build_ulam(&c, 1, 27, UlamBuild::Exact).unwrap();
        let f = Observable::coordinate(&c, &[0]).with_offset(0.5);
        let tw = twist(&op, &f, 0.0).unwrap();
        for i in 0..27 {
            for j in 0..27 {
                assert_eq!(tw.get(i, j), Complex64::new(op.get(i, j), 0.0));
            }
        }
        let tw = twist(&op, &f, 1.7).unwrap();
        for i in 0..27 {
            for j in 0..27 {
                assert_abs_diff_eq!(tw.get(i, j).norm(), op.get(i, j), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn twist_rejects_unmodeled_support() {
        let c = uncoupled(4);
        let op = build_ulam(&c, 1, 9, UlamBuild::Exact).unwrap();
        let f = Observable::coordinate(&c, &[1]);
        assert!(matches!(twist(&op, &f, 1.0), Err(Error::Support(1))));
        let two = build_ulam(&c, 2, 9, UlamBuild::Exact).unwrap();
        assert!(twist(&two, &Observable::product(&c, &[0], &[1]), 1.0).is_ok());
    }

    #[test]
    fn constant_observable_twists_by_a_phase() {
        let c = uncoupled(3);
        let op = build_ulam(&c, 1, 27, UlamBuild::Exact).unwrap();
        let f = Observable::constant(0.3);
        let curve = lambda_curve(&op, &f, &[-1.0, -0.5, 0.0, 0.5, 1.0], DEFAULT_FD_STEP, 1e-13).unwrap();
        for (t, l) in curve.t.iter().zip(&curve.lambda) {
            let expected = Complex64::new(0.0, 0.3 * t).exp();
            assert_abs_diff_eq!((l - expected).norm(), 0.0, epsilon = 1e-10);
        }
        let radii = spectral_radius_map(&op, &f, &[0.5, 2.0], 200, 1).unwrap();
        for r in radii {
            assert_abs_diff_eq!(r.radius, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn lambda_curve_needs_zero() {
        let c = uncoupled(3);
        let op = build_ulam(&c, 1, 9, UlamBuild::Exact).unwrap();
        assert!(lambda_curve(&op, &Observable::zero(), &[0.5], DEFAULT_FD_STEP, 1e-12).is_err());
    }

    #[test]
    fn lambda_is_conjugate_symmetric_and_subunitary() {
        let c = uncoupled(3);
        let op = build_ulam(&c, 1, 81, UlamBuild::Exact).unwrap();
        let f = op
            .center_observable(&Observable::cos_coordinate(&c, &[0]), 1e-14)
            .unwrap();
        let grid: Vec<f64> = (-16..=16).map(|i| i as f64 / 16.0).collect();
        let curve = lambda_curve(&op, &f, &grid, DEFAULT_FD_STEP, 1e-13).unwrap();
        for (t, l) in curve.t.iter().zip(&curve.lambda) {
            assert!(l.norm() <= 1.0 + 1e-6);
            let mirror = curve.lambda_at(-t).unwrap();
            assert_abs_diff_eq!((mirror - l.conj()).norm(), 0.0, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(curve.lambda_at(0.0).unwrap().re, 1.0, epsilon = 1e-12);
        assert!(curve.dlambda0.norm() < 1e-8);
    }

    #[test]
    fn matrix_market_round_trip() {
        let c = LatticeConfig::diffusive(5, SiteMap::zigzag3(), 0.02).unwrap();
        let op = build_ulam(
            &c,
            2,
            9,
            UlamBuild::MonteCarlo {
                samples_per_cell: 50,
                seed: 2,
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        op.write_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("%%MatrixMarket matrix coordinate real general"));
        let back = UlamOperator::read_matrix_market(std::io::Cursor::new(buf), 2).unwrap();
        assert_eq!(back.dim(), op.dim());
        assert_eq!(back.to_dense(), op.to_dense());
    }

    #[test]
    fn char_fn_trivial_cases() {
        let c = uncoupled(3);
        let op = build_ulam(&c, 1, 27, UlamBuild::Exact).unwrap();
        let f = Observable::coordinate(&c, &[0]).with_offset(0.5);
        let run = crate::ensemble::run_ensemble_checkpoints(&c, &f, 500, &[1, 2, 3], 10, 4);
        let rep = char_fn_check(&op, &f, 0.0, &[1, 2, 3], &run, 1e-13).unwrap();
        for (e, p) in rep.empirical.iter().zip(&rep.predicted) {
            assert_abs_diff_eq!(e.re, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p.re, 1.0, epsilon = 1e-10);
        }
        let z = Observable::zero();
        let run0 = crate::ensemble::run_ensemble_checkpoints(&c, &z, 100, &[1, 2], 10, 4);
        let rep0 = char_fn_check(&op, &z, 0.7, &[1, 2], &run0, 1e-13).unwrap();
        assert!(rep0.mismatch.iter().all(|&m| m < 1e-10));
        assert!(char_fn_check(&op, &f, 0.5, &[5], &run, 1e-13).is_err());
    }
}
