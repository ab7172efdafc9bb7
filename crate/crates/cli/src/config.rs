//! Experiment configuration files.

use std::path::PathBuf;

use cml_core::observable::Observable;
use cml_core::spectral::UlamBuild;
use cml_core::LatticeConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub observable: Option<ObservableSpec>,
    pub experiment: Experiment,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Master seed for every random stream of the run.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let needs_observable = !matches!(
            self.experiment,
            Experiment::CheckCoupling(_) | Experiment::BvSuite(_) | Experiment::Spectrum(_)
        );
        if needs_observable && self.observable.is_none() {
            return Err(CliError::Validation(format!(
                "experiment '{}' needs an observable",
                self.experiment.name()
            )));
        }
        if let Some(o) = &self.observable {
            o.build(&self.lattice)?;
        }
        self.experiment.validate()
    }
}

/// Pass/fail levels used by `summary`. Unset fields are not checked.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Largest acceptable KS distance.
    pub ks_max: Option<f64>,
    /// Largest acceptable relative deviation of an LLT ratio from `|I|`.
    pub llt_rel_tol: Option<f64>,
    /// Relative tolerance (on top of three standard errors) between variance
    /// estimates.
    pub variance_rel_tol: Option<f64>,
    /// Every radius estimate must stay below this.
    pub radius_max: Option<f64>,
    /// Smallest acceptable spectral gap.
    pub gap_min: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservableKind {
    Coordinate,
    CosCoordinate,
    Product,
    Coboundary,
    Constant,
}

/// `{"kind": "coordinate", "site": [0]}`, `{"kind": "cos_coordinate", "site": [0]}`,
/// `{"kind": "product", "sites": [[0], [1]]}`, `{"kind": "coboundary", "of": {..}}`
/// or `{"kind": "constant", "value": c}`, with optional centering.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSpec {
    pub kind: ObservableKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<Vec<Vec<i64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub of: Option<Box<ObservableSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Subtract the time average along a long trajectory.
    #[serde(default)]
    pub center: bool,
    #[serde(default = "default_center_samples")]
    pub center_samples: usize,
    #[serde(default = "default_burn")]
    pub center_burn: usize,
    /// Fixed offset subtracted from the observable (ignored when centering).
    #[serde(default)]
    pub offset: f64,
}

fn default_center_samples() -> usize {
    100_000
}

fn default_burn() -> usize {
    1000
}

impl ObservableSpec {
    /// The uncentered observable with its fixed offset.
    pub fn build(&self, cfg: &LatticeConfig) -> Result<Observable, CliError> {
        let bad = |m: &str| CliError::Validation(format!("observable '{:?}': {m}", self.kind));
        let dim = cfg.dim();
        let check_site = |s: &[i64]| {
            if s.len() == dim {
                Ok(())
            } else {
                Err(bad(&format!("site {s:?} needs {dim} coordinates")))
            }
        };
        let f = match self.kind {
            ObservableKind::Coordinate | ObservableKind::CosCoordinate => {
                let s = self.site.as_deref().ok_or_else(|| bad("missing 'site'"))?;
                check_site(s)?;
                if self.kind == ObservableKind::Coordinate {
                    Observable::coordinate(cfg, s)
                } else {
                    Observable::cos_coordinate(cfg, s)
                }
            }
            ObservableKind::Product => {
                let s = self.sites.as_deref().ok_or_else(|| bad("missing 'sites'"))?;
                if s.len() != 2 {
                    return Err(bad("'sites' must list two sites"));
                }
                check_site(&s[0])?;
                check_site(&s[1])?;
                Observable::product(cfg, &s[0], &s[1])
            }
            ObservableKind::Coboundary => {
                let inner = self.of.as_deref().ok_or_else(|| bad("missing 'of'"))?;
                Observable::coboundary(&inner.build(cfg)?, cfg)
            }
            ObservableKind::Constant => Observable::constant(self.value.ok_or_else(|| bad("missing 'value'"))?),
        };
        Ok(f.with_offset(self.offset))
    }
}

/// `{"kind": "...", "params": {...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum Experiment {
    Simulate(SimulateParams),
    Variance(VarianceParams),
    Clt(CltParams),
    Llt(LltParams),
    Spectrum(SpectralParams),
    LambdaCurve(LambdaCurveParams),
    RadiusMap(RadiusMapParams),
    CheckCoupling(CheckCouplingParams),
    BvSuite(BvSuiteParams),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Simulate(_) => "simulate",
            Experiment::Variance(_) => "variance",
            Experiment::Clt(_) => "clt",
            Experiment::Llt(_) => "llt",
            Experiment::Spectrum(_) => "spectrum",
            Experiment::LambdaCurve(_) => "lambda-curve",
            Experiment::RadiusMap(_) => "radius-map",
            Experiment::CheckCoupling(_) => "check-coupling",
            Experiment::BvSuite(_) => "bv-suite",
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(CliError::Validation(format!("'{name}' must be positive")))
            } else {
                Ok(())
            }
        };
        let ladder = |name: &str, v: &[usize]| {
            if v.is_empty() || v.contains(&0) {
                Err(CliError::Validation(format!("'{name}' must list positive horizons")))
            } else {
                Ok(())
            }
        };
        match self {
            Experiment::Simulate(p) => {
                positive("n_traj", p.n_traj)?;
                ladder("n", &p.n)
            }
            Experiment::Variance(p) => {
                positive("n", p.n)?;
                positive("n_traj", p.n_traj)?;
                positive("n_avg", p.n_avg)?;
                if let Some(s) = &p.scan {
                    ladder("scan", s)?;
                }
                if let Some(s) = &p.spectral {
                    s.validate()?;
                }
                Ok(())
            }
            Experiment::Clt(p) => {
                positive("n_traj", p.n_traj)?;
                ladder("n", &p.n)?;
                p.sigma2.validate()
            }
            Experiment::Llt(p) => {
                positive("n_traj", p.n_traj)?;
                ladder("n", &p.n)?;
                if p.intervals.iter().any(|i| !(i[0] <= i[1])) {
                    return Err(CliError::Validation("intervals must satisfy a <= b".into()));
                }
                p.sigma2.validate()
            }
            Experiment::Spectrum(p) => p.operator.validate(),
            Experiment::LambdaCurve(p) => {
                p.operator.validate()?;
                p.t_grid.values().map(|_| ())
            }
            Experiment::RadiusMap(p) => {
                p.operator.validate()?;
                positive("n_power", p.n_power)?;
                p.t_grid.values().map(|_| ())
            }
            Experiment::CheckCoupling(p) => positive("n_samples", p.n_samples),
            Experiment::BvSuite(p) => positive("n", p.n),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateParams {
    /// Horizons at which `S_n f` is recorded; the samples file uses the last.
    pub n: Vec<usize>,
    pub n_traj: usize,
    #[serde(default = "default_burn")]
    pub n_burn: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceParams {
    /// Horizon of the ensemble estimate `Var(S_n f) / n`.
    pub n: usize,
    pub n_traj: usize,
    #[serde(default = "default_burn")]
    pub n_burn: usize,
    /// Green–Kubo truncation `K`.
    #[serde(default = "default_lags")]
    pub lags: usize,
    /// Length of the Green–Kubo time average.
    pub n_avg: usize,
    /// Optional degeneracy scan over these horizons.
    #[serde(default)]
    pub scan: Option<Vec<usize>>,
    /// Optional third estimate `-lambda''(0)` from an Ulam operator.
    #[serde(default)]
    pub spectral: Option<OperatorParams>,
}

fn default_lags() -> usize {
    cml_core::ensemble::DEFAULT_GK_LAGS
}

/// Where the variance used for normalization comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaSource {
    /// Use this value when given.
    #[serde(default)]
    pub value: Option<f64>,
    /// Otherwise estimate by Green–Kubo with these settings.
    #[serde(default = "default_lags")]
    pub lags: usize,
    #[serde(default = "default_n_avg")]
    pub n_avg: usize,
}

fn default_n_avg() -> usize {
    1_000_000
}

impl Default for SigmaSource {
    fn default() -> Self {
        SigmaSource {
            value: None,
            lags: default_lags(),
            n_avg: default_n_avg(),
        }
    }
}

impl SigmaSource {
    fn validate(&self) -> Result<(), CliError> {
        match self.value {
            Some(v) if !(v > 0.0) => Err(CliError::Validation(format!("sigma2 value {v} must be positive"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltParams {
    /// Horizons, typically a doubling ladder.
    pub n: Vec<usize>,
    pub n_traj: usize,
    #[serde(default = "default_burn")]
    pub n_burn: usize,
    #[serde(default)]
    pub sigma2: SigmaSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LltParams {
    pub n: Vec<usize>,
    pub n_traj: usize,
    #[serde(default = "default_burn")]
    pub n_burn: usize,
    pub intervals: Vec<[f64; 2]>,
    #[serde(default)]
    pub sigma2: SigmaSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildKind {
    Exact,
    MonteCarlo,
}

/// Ulam operator on `k` sites with `cells` cells per site.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorParams {
    #[serde(default = "one")]
    pub k: usize,
    pub cells: usize,
    pub build: BuildKind,
    #[serde(default)]
    pub samples_per_cell: Option<usize>,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn one() -> usize {
    1
}

fn default_tol() -> f64 {
    1e-12
}

impl OperatorParams {
    pub fn build_spec(&self, seed: u64) -> UlamBuild {
        match self.build {
            BuildKind::Exact => UlamBuild::Exact,
            BuildKind::MonteCarlo => UlamBuild::MonteCarlo {
                samples_per_cell: self.samples_per_cell.unwrap_or(1000),
                seed,
            },
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if !(1..=3).contains(&self.k) || self.cells == 0 || !(self.tol > 0.0) {
            return Err(CliError::Validation(
                "operator needs k in 1..=3, cells > 0 and tol > 0".into(),
            ));
        }
        if self.build == BuildKind::Exact && self.samples_per_cell.is_some() {
            return Err(CliError::Validation(
                "'samples_per_cell' only applies to monte_carlo builds".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralParams {
    #[serde(flatten)]
    pub operator: OperatorParams,
    /// Also write the operator in Matrix Market format.
    #[serde(default)]
    pub export_matrix: bool,
}

/// Either an explicit list or `{"start", "stop", "step"}` (inclusive).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TGrid {
    List(Vec<f64>),
    Range { start: f64, stop: f64, step: f64 },
}

impl TGrid {
    pub fn values(&self) -> Result<Vec<f64>, CliError> {
        match self {
            TGrid::List(v) if !v.is_empty() => Ok(v.clone()),
            TGrid::List(_) => Err(CliError::Validation("empty t grid".into())),
            &TGrid::Range { start, stop, step } => {
                if !(step > 0.0) || stop < start {
                    return Err(CliError::Validation("t grid needs step > 0 and stop >= start".into()));
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                if n > 100_000 {
                    return Err(CliError::Validation("t grid has more than 1e5 points".into()));
                }
                // snap to integer multiples of the step so that 0 is hit exactly
                Ok((0..=n)
                    .map(|i| {
                        let t = start + i as f64 * step;
                        let q = (t / step).round();
                        if (t - q * step).abs() < 1e-9 * step {
                            q * step
                        } else {
                            t
                        }
                    })
                    .collect())
            }
        }
    }

    pub fn spacing(&self) -> Option<f64> {
        match self {
            TGrid::Range { step, .. } => Some(*step),
            TGrid::List(_) => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaCurveParams {
    #[serde(flatten)]
    pub operator: OperatorParams,
    pub t_grid: TGrid,
    /// Finite-difference step at 0; defaults to the grid spacing, or 1/64.
    #[serde(default)]
    pub h: Option<f64>,
    /// Center the observable on the operator's stationary density.
    #[serde(default = "yes")]
    pub spectral_center: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiusMapParams {
    #[serde(flatten)]
    pub operator: OperatorParams,
    pub t_grid: TGrid,
    #[serde(default = "default_n_power")]
    pub n_power: usize,
    #[serde(default = "yes")]
    pub spectral_center: bool,
}

fn default_n_power() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckCouplingParams {
    #[serde(default = "default_coupling_samples")]
    pub n_samples: usize,
}

fn default_coupling_samples() -> usize {
    1000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BvSuiteParams {
    pub n: usize,
    /// Lasota–Yorke constant; defaults to the calibrated one.
    #[serde(default)]
    pub c: Option<f64>,
}
