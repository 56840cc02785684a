use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CieError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CieError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CieError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CieError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configuration, files,
    /// parameters) rather than a failure during computation.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            CieError::Parameter(_)
                | CieError::Validation(_)
                | CieError::Parse { .. }
                | CieError::Config(_)
        )
    }
}
