use std::path::PathBuf;

use flap_core::meta::MetaError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlapError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: malformed TOML: {message}")]
    Toml { path: PathBuf, message: String },
    #[error("{path}: CSV error: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: unsupported {what} version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("{path}: existing header does not match the metrics schema")]
    SchemaMismatch { path: PathBuf },
    #[error("{path}: corrupt checkpoint: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("invalid override `{0}`: {1}")]
    Override(String, String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Meta(#[from] MetaError),
}

impl FlapError {
    /// Process exit status for the command line: one per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            FlapError::Config(_) | FlapError::Override(..) => 2,
            FlapError::Io { .. } => 3,
            FlapError::Json { .. }
            | FlapError::Toml { .. }
            | FlapError::Csv { .. }
            | FlapError::Version { .. }
            | FlapError::SchemaMismatch { .. }
            | FlapError::CorruptCheckpoint { .. } => 4,
            FlapError::Meta(MetaError::NonFinite { .. }) => 6,
            FlapError::Meta(_) => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlapError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        FlapError::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FlapError>;
