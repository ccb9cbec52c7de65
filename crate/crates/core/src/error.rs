use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RadError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RadError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema column `{column}` (logical field `{field}`) not found in input")]
    MissingColumn { field: String, column: String },

    #[error("{malformed} of {total} rows malformed (limit is 50%); first problems: {sample:?}")]
    TooManyMalformed {
        malformed: usize,
        total: usize,
        sample: Vec<String>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unknown cohort {0}")]
    UnknownCohort(String),

    #[error("training diverged at epoch {epoch}: loss {loss} exceeds 10x initial loss {initial}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },

    #[error("missing artifact {path}; run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("bad artifact {path}: {reason}")]
    BadArtifact { path: PathBuf, reason: String },
}

impl RadError {
    /// Process exit status for this error: 2 configuration, 3 missing or
    /// unreadable upstream artifact, 4 numeric divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RadError::Config(_) | RadError::InvalidArgument(_) => 2,
            RadError::MissingArtifact { .. } | RadError::BadArtifact { .. } => 3,
            RadError::Diverged { .. } => 4,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RadError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        RadError::InvalidArgument(msg.into())
    }
}
