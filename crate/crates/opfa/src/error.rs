use thiserror::Error;

/// Errors surfaced by model construction, solvers and file I/O.
#[derive(Debug, Error)]
pub enum OpfaError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("infeasible iterate: {0}")]
    Infeasible(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("quadratic form is not positive semidefinite ({0})")]
    NotPsd(String),

    #[error("search space too large: {0}")]
    SearchSpaceTooLarge(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {detail}")]
    Parse { path: String, detail: String },
}

impl OpfaError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        OpfaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, detail: impl Into<String>) -> Self {
        OpfaError::Parse {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, OpfaError>;
