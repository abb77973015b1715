use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error category; the CLI maps each category to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("data validation failed: {0}")]
    DataValidation(String),

    #[error("channel mapping error: {0}")]
    Mapping(String),

    #[error("sampling infeasible: {0}")]
    SamplingInfeasible(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("scenario saturated: positive rate {rate:.3} exceeds {limit:.2}")]
    Saturation { rate: f64, limit: f64 },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unsupported format version {found} (this build reads up to {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch")]
    Checksum,

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::Saturation { .. } => ErrorKind::Config,
            Error::DataValidation(_)
            | Error::Mapping(_)
            | Error::SamplingInfeasible(_)
            | Error::Shape(_)
            | Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::Checksum
            | Error::Malformed(_)
            | Error::Json(_) => ErrorKind::Data,
            Error::Divergence { .. } | Error::UndefinedMetric(_) => ErrorKind::Runtime,
            Error::Io { .. } => ErrorKind::Io,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
