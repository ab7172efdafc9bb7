use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, ExperimentConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub experiment: Option<String>,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub workers: usize,
    pub parallel: bool,
    pub wall_time_s: f64,
    /// `ok`, `validation_error`, `numerical_error`, `check_failed` or `error`.
    pub status: String,
    pub exit_code: i32,
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(config_text: &str, cfg: Option<&ExperimentConfig>) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            experiment: cfg.map(|c| c.experiment.name().to_string()),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed: cfg.map(|c| c.seed),
            workers: 1,
            parallel: cfg!(feature = "parallel"),
            wall_time_s: 0.0,
            status: "ok".into(),
            exit_code: 0,
            error: None,
            files: Vec::new(),
        }
    }

    pub fn record_file(&mut self, name: &str, bytes: &[u8]) {
        self.files.push(FileEntry {
            name: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }

    pub fn set_status(&mut self, err: Option<&CliError>) {
        let Some(e) = err else {
            return;
        };
        self.status = match e {
            CliError::Validation(_) => "validation_error",
            CliError::Numerical(_) => "numerical_error",
            CliError::CheckFailed(_) => "check_failed",
            _ => "error",
        }
        .into();
        self.exit_code = e.exit_code();
        self.error = Some(e.to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingManifest(dir.to_path_buf()),
            _ => CliError::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Names of listed files whose content no longer matches the recorded hash.
    pub fn stale_files(&self, dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|f| {
                std::fs::read(dir.join(&f.name))
                    .map(|b| sha256_hex(&b) != f.sha256)
                    .unwrap_or(true)
            })
            .map(|f| f.name.clone())
            .collect()
    }
}
