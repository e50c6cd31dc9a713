use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SsnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SsnError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("model error: {0}")]
    Model(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("unsupported op in backward: {0}")]
    UnsupportedOp(String),

    #[error("stale index: built with parameter hash {index:016x}, model has {model:016x}")]
    StaleIndex { index: u64, model: u64 },

    #[error("report error: {0}")]
    Report(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SsnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SsnError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        SsnError::Format {
            offset,
            message: message.into(),
        }
    }

    /// Short stable tag used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            SsnError::Dimension(_) => "dimension",
            SsnError::Config(_) => "config",
            SsnError::Data(_) => "data",
            SsnError::Format { .. } => "format",
            SsnError::Model(_) => "model",
            SsnError::Checkpoint(_) => "checkpoint",
            SsnError::Numeric(_) => "numeric",
            SsnError::Argument(_) => "argument",
            SsnError::UnsupportedOp(_) => "unsupported_op",
            SsnError::StaleIndex { .. } => "stale_index",
            SsnError::Report(_) => "report",
            SsnError::Io { .. } => "io",
        }
    }
}
