use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RearmError>;

#[derive(Debug, Error)]
pub enum RearmError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {stage}: {msg}")]
    Shape { stage: &'static str, msg: String },

    #[error("non-finite value in {tensor} ({detail})")]
    NonFinite { tensor: String, detail: String },

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl RearmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RearmError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(stage: &'static str, msg: impl Into<String>) -> Self {
        RearmError::Shape {
            stage,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        RearmError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            RearmError::Config(_) => 1,
            RearmError::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
