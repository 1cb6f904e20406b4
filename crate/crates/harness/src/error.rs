use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid scenario field {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error(transparent)]
    Numerical(#[from] dualenkf::Error),

    #[error("{} replicate(s) failed; first: {first}", .count)]
    ReplicatesFailed { count: usize, first: String },

    #[error("mean errors sit at the floating-point floor ({max_error:e}); nothing to fit")]
    FlooredError { max_error: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed records: {message}")]
    Records { path: PathBuf, message: String },
}

impl HarnessError {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        HarnessError::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 parse/validation, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Parse { .. } | HarnessError::Validation { .. } => 1,
            HarnessError::Numerical(e) if !e.is_numerical() => 1,
            HarnessError::Numerical(_) | HarnessError::ReplicatesFailed { .. } | HarnessError::FlooredError { .. } => 2,
            HarnessError::Io { .. } | HarnessError::Records { .. } => 3,
        }
    }
}
