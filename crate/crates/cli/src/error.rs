use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] clipq_core::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing {what} at {path}; run `clipq {hint}` first")]
    Missing {
        what: &'static str,
        path: PathBuf,
        hint: &'static str,
    },

    #[error("{what} at {path} was produced by a different config (hash {found}, expected {expected}); rerun the producing stage or pass --force")]
    HashMismatch {
        what: &'static str,
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("report: {0}")]
    Report(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
