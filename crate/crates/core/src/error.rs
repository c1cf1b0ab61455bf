use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
///
/// The variants mirror the error classes callers act on: bad arguments,
/// bad configuration, malformed inputs on disk, and numeric breakdowns.
#[derive(Debug, Error)]
pub enum Error {
    #[error("argument error: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error in {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("probe error: {0}")]
    Probe(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("synthesis failed for {sample_id} ({style}): {reason}")]
    Synthesis {
        sample_id: String,
        style: String,
        reason: String,
    },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::Schema(_) => "schema",
            Error::Numeric(_) => "numeric",
            Error::Format(_) => "format",
            Error::Data { .. } => "data",
            Error::Evaluation(_) => "evaluation",
            Error::Probe(_) => "probe",
            Error::Checkpoint(_) => "checkpoint",
            Error::Synthesis { .. } => "synthesis",
            Error::Tensor(_) => "tensor",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
