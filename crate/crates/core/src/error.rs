use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The requested alteration cannot be applied to this graph.
    #[error("operation not applicable: {0}")]
    NotApplicable(String),

    #[error("no whitelisted alteration is applicable at step {step}")]
    AugmentationExhausted { step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category name, used for exit codes and log lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape-error",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NotApplicable(_) => "not-applicable",
            Error::AugmentationExhausted { .. } => "augmentation-exhausted",
            Error::Io { .. } => "io-error",
            Error::Format { .. } => "format-error",
            Error::Config(_) => "config-error",
        }
    }
}
