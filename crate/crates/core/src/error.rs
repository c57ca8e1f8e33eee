use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FkmdError>;

#[derive(Debug, Error)]
pub enum FkmdError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("insufficient data: need at least {required} {what}, got {actual}")]
    InsufficientData {
        what: &'static str,
        required: usize,
        actual: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("normal matrix is singular at ridge = 0; use a positive ridge")]
    RankDeficient,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("forecast diverged; dominant retained mode has lambda = {re} {im:+}i")]
    Divergence { re: f64, im: f64 },

    #[error("mode filter retained no modes")]
    EmptyModeSet,

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("integration produced a non-finite state at step {step}")]
    Integration { step: usize },
}

/// Coarse classification used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Argument,
    Data,
    Numerical,
}

impl FkmdError {
    pub fn class(&self) -> ErrorClass {
        use FkmdError::*;
        match self {
            InvalidParameter(_) | Unsupported(_) => ErrorClass::Argument,
            Io { .. }
            | Format(_)
            | Parse { .. }
            | InsufficientData { .. }
            | DimensionMismatch(_)
            | DegenerateData(_) => ErrorClass::Data,
            NotPsd { .. }
            | RankDeficient
            | Numerical(_)
            | Divergence { .. }
            | EmptyModeSet
            | Integration { .. } => ErrorClass::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FkmdError::Io {
            path: path.into(),
            source,
        }
    }
}
