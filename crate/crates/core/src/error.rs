use std::path::PathBuf;

/// Errors produced by the control toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("environment generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    #[error("infeasible environment: {0}")]
    Infeasible(String),

    #[error("no points fell inside the grid bounds ({dropped} dropped)")]
    NoPointsInBounds { dropped: usize },

    #[error("pitch {pitch} is within {eps} of the tangent singularity")]
    GimbalLock { pitch: f64, eps: f64 },

    #[error("non-finite value in {layer}")]
    NonFinite { layer: String },

    #[error("training diverged at epoch {epoch}, environment {env}: {reason}")]
    Training { epoch: usize, env: usize, reason: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
