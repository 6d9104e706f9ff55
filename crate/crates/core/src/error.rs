use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the generation pipeline.
///
/// Variants follow the failure classes the commands report: bad configuration,
/// violated preconditions, shape/schema mismatches, and numerical failure during
/// training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable class name, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Structural(_) => "structural",
            Error::Training { .. } => "training",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! domain {
    ($($arg:tt)*) => { $crate::error::Error::Domain(format!($($arg)*)) };
}
macro_rules! structural {
    ($($arg:tt)*) => { $crate::error::Error::Structural(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use {config_err, domain, structural};
