use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id {id:?} in {path}")]
    DuplicateId { path: PathBuf, id: String },

    #[error("{path} is empty")]
    EmptyFile { path: PathBuf },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("provider request failed after {attempts} attempt(s){}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Provider {
        status: Option<u16>,
        attempts: u32,
        message: String,
    },

    #[error("missing artifact {artifact}; run `strata {producer}` first")]
    MissingArtifact { artifact: PathBuf, producer: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Process exit code for the CLI: 1 validation, 2 provider, 3 missing upstream artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Provider { .. } => 2,
            Error::MissingArtifact { .. } => 3,
            _ => 1,
        }
    }
}
