use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SmeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SmeError {
    /// A scalar argument or configuration field is out of its domain.
    #[error("invalid `{field}`: {reason}")]
    InvalidArgument { field: String, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("matrix is empty")]
    EmptyMatrix,

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("regressors are not persistently exciting (min eigenvalue of ZZᵀ/N is {c3_hat:e})")]
    NotPersistentlyExciting { c3_hat: f64 },

    #[error("parameter set is empty")]
    EmptySet,

    #[error("noise constants c1/c2 are unknown for this family; calibrate kappa instead")]
    UnknownConstants,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl SmeError {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        SmeError::InvalidArgument {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SmeError::Io {
            path: path.into(),
            source,
        }
    }
}
