use std::path::PathBuf;

use crate::graph::Signature;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidModel(Vec<crate::graph::Violation>),

    #[error("unsupported layer kind `{0}`")]
    UnsupportedLayer(String),

    #[error("malformed model file: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel group {0} is not prunable")]
    NotPrunable(usize),

    #[error("invalid pruning request: {0}")]
    InvalidPruning(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unmeasured signature {0}")]
    UnmeasuredSignature(Signature),

    #[error("latency provider failed: {0}")]
    Provider(String),

    #[error("cache fingerprint mismatch in {path}: expected {expected}, found {found}")]
    FingerprintMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("malformed record at {path}:{line}: {reason}")]
    Record {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("infeasible latency goal at step {step}")]
    Infeasible { step: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that originate in the latency backend.
    pub fn is_provider_failure(&self) -> bool {
        matches!(self, Error::Provider(_) | Error::UnmeasuredSignature(_))
    }
}
