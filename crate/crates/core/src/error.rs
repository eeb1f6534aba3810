use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input size {height}x{width} is not divisible by {required}")]
    Indivisible {
        height: usize,
        width: usize,
        required: usize,
    },

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("backbone `{0}` requires an external definition; register one before building")]
    ExternalBackboneRequired(String),

    #[error("unknown model `{name}`; valid names: {}", valid.join(", "))]
    UnknownModel { name: String, valid: Vec<String> },

    #[error("invalid model assembly `{name}`: {reason}")]
    Assembly { name: String, reason: String },

    #[error("unknown layer id `{id}`; registered ids: {}", valid.join(", "))]
    UnknownLayer { id: String, valid: Vec<String> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("weight manifest mismatch: {0}")]
    WeightMismatch(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable category string, used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Tensor(_) | Error::Shape(_) | Error::Indivisible { .. } => "shape",
            Error::UnknownBackbone(_)
            | Error::ExternalBackboneRequired(_)
            | Error::UnknownModel { .. }
            | Error::Assembly { .. }
            | Error::UnknownLayer { .. } => "model",
            Error::Config(_) => "config",
            Error::Dataset(_) | Error::Image(_) => "data",
            Error::NonFiniteLoss { .. } => "numeric",
            Error::Integrity { .. } | Error::ConfigMismatch { .. } | Error::WeightMismatch(_) => "checkpoint",
            Error::Io { .. } | Error::Json(_) | Error::Csv(_) => "io",
        }
    }
}
