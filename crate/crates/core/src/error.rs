//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Convergence,
    Transport,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),

    #[error("invalid feature vector: {0}")]
    InvalidFeatures(String),

    #[error("invalid parameter matrix: {0}")]
    InvalidTheta(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("column `{0}` has zero variance")]
    ZeroVariance(String),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("undefined for zero vector: {0}")]
    ZeroVector(String),

    #[error("bootstrap failed: {failed} of {total} replicates did not converge")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("estimation did not converge: {0}")]
    NotConverged(String),

    #[error("prompt slot `{0}` is missing or invalid")]
    PromptSlot(String),

    #[error("could not parse allocation from response: {0}")]
    Parse(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("rate limited: {0}")]
    RateLimited(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a short description of what was being attempted.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Context { source, .. } => source.class(),
            Error::InvalidConfig(_) | Error::PromptSlot(_) => ErrorClass::Usage,
            Error::NotConverged(_) | Error::BootstrapFailures { .. } => ErrorClass::Convergence,
            Error::Transport(_) | Error::RateLimited(_) => ErrorClass::Transport,
            _ => ErrorClass::Data,
        }
    }
}
