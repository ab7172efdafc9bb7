use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {0} lies outside the unit interval")]
    Domain(f64),

    #[error("invalid site map: {0}")]
    InvalidMap(String),

    #[error("grid is not aligned with the branch images: {0}")]
    Alignment(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("at least {min} samples per cell are required, got {got}")]
    SampleCount { min: usize, got: usize },

    #[error("observable reads site {0}, which is not modeled by the operator")]
    Support(usize),

    #[error("variance must be positive, got {0}")]
    DegenerateVariance(f64),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("eigenvector overlap {overlap:.3} at t = {t} is below 0.9; refine the t grid")]
    BranchTracking { t: f64, overlap: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of an iterative numerical method, as opposed to bad
    /// input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonConvergence { .. } | Error::BranchTracking { .. })
    }
}
