//! Batch front end: reads an experiment config, runs it through `cml-core`
//! and writes a JSON report, CSV data and a manifest into an output directory.

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod summary;

use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

pub use config::ExperimentConfig;
pub use manifest::Manifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const WORKERS_ENV: &str = "CML_LAB_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("no manifest.json in {0}")]
    MissingManifest(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Numerical(_) | CliError::CheckFailed(_) => EXIT_NUMERICAL,
            CliError::MissingManifest(_) | CliError::Io(_) | CliError::Json(_) => EXIT_OTHER,
        }
    }
}

impl From<cml_core::Error> for CliError {
    fn from(e: cml_core::Error) -> Self {
        use cml_core::Error as E;
        match e {
            E::Io(e) => CliError::Io(e),
            E::NonConvergence { .. } | E::BranchTracking { .. } | E::DegenerateVariance(_) => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker cap; falls back to `CML_LAB_WORKERS`, then to all cores.
    pub workers: Option<usize>,
    /// Overrides `output_dir` of the config.
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub out_dir: Option<PathBuf>,
    pub error: Option<CliError>,
}

fn resolve_workers(opt: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(w) = opt {
        return if w == 0 {
            Err(CliError::Validation("--workers must be positive".into()))
        } else {
            Ok(Some(w))
        };
    }
    match std::env::var(WORKERS_ENV) {
        Ok(s) if !s.trim().is_empty() => match s.trim().parse::<usize>() {
            Ok(w) if w > 0 => Ok(Some(w)),
            _ => Err(CliError::Validation(format!(
                "{WORKERS_ENV}={s} is not a positive integer"
            ))),
        },
        _ => Ok(None),
    }
}

/// Runs one config file. Errors after the output directory is known are
/// recorded in its manifest as well as returned.
pub fn run(config_path: &Path, opts: &RunOptions) -> RunOutcome {
    let start = Instant::now();
    let text = match std::fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => return failed(None, CliError::Io(e)),
    };
    let parsed = ExperimentConfig::from_json(&text);
    let out_dir = opts
        .out
        .clone()
        .or_else(|| parsed.as_ref().ok().and_then(|c| c.output_dir.clone()));
    let Some(out_dir) = out_dir else {
        let err = parsed
            .err()
            .unwrap_or_else(|| CliError::Validation("no output directory: set 'output_dir' or pass --out".into()));
        return failed(None, err);
    };
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        return failed(None, CliError::Io(e));
    }

    let mut manifest = Manifest::new(&text, parsed.as_ref().ok());
    let result = (|| {
        let cfg = parsed?;
        let workers = resolve_workers(opts.workers)?;
        manifest.workers = workers.unwrap_or_else(cml_core::exec::current_workers);
        let outputs = match workers {
            Some(w) => cml_core::exec::with_workers(w, || experiments::run_experiment(&cfg)),
            None => experiments::run_experiment(&cfg),
        }?;
        std::fs::write(out_dir.join("config.json"), text.as_bytes())?;
        manifest.record_file("config.json", text.as_bytes());
        for (name, bytes) in &outputs.files {
            std::fs::write(out_dir.join(name), bytes)?;
            manifest.record_file(name, bytes);
        }
        let report = serde_json::to_vec_pretty(&outputs.report)?;
        std::fs::write(out_dir.join("report.json"), &report)?;
        manifest.record_file("report.json", &report);
        match outputs.check_failure {
            Some(msg) => Err(CliError::CheckFailed(msg)),
            None => Ok(()),
        }
    })();

    manifest.wall_time_s = start.elapsed().as_secs_f64();
    let error = result.err();
    manifest.set_status(error.as_ref());
    if let Err(e) = manifest.write(&out_dir) {
        return failed(Some(out_dir), error.unwrap_or(e));
    }
    match error {
        Some(e) => failed(Some(out_dir), e),
        None => RunOutcome {
            exit_code: EXIT_OK,
            out_dir: Some(out_dir),
            error: None,
        },
    }
}

fn failed(out_dir: Option<PathBuf>, e: CliError) -> RunOutcome {
    RunOutcome {
        exit_code: e.exit_code(),
        out_dir,
        error: Some(e),
    }
}
