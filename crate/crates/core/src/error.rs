//! Error taxonomy shared by every module.

use thiserror::Error;

/// Unified error type. Variants map onto the process exit codes used by the
/// CLI: I/O problems exit 2, everything else exits 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes for an operation; names the op and both shapes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: String, detail: String },

    /// A forward or backward pass produced NaN/Inf.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A precondition stated by an operation contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// File-lookup embedding provider has no vector for this id.
    #[error("missing embedding for id '{id}'")]
    MissingEmbedding { id: String },

    /// A data or report file failed to parse; carries the 1-based line.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Metric is undefined on this input (e.g. single-class AUC).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Parse { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
