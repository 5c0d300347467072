use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("decode window radius {rho} rad is below the anchor spacing estimate {spacing} rad")]
    WindowBelowSpacing { rho: f64, spacing: f64 },

    #[error("low-pass mask keeps no dimensions at threshold {0}")]
    EmptyMask(f64),

    #[error("ensemble centroid is degenerate (mean vector norm {0:e}); inspect the candidates")]
    DegenerateCentroid(f64),

    #[error("training diverged at batch {batch}: loss {loss}, max |logit| {max_exponent}")]
    Diverged {
        batch: usize,
        loss: f64,
        max_exponent: f64,
    },

    #[error("backward called without a cached forward pass")]
    MissingForwardCache,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn pre(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
