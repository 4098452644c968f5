use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: spatial size {height}x{width} is not divisible by {factor}")]
    Indivisible {
        op: &'static str,
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid value in {op}: {detail}")]
    Value { op: &'static str, detail: String },

    #[error("unknown source class id {0}")]
    UnknownClass(u32),

    #[error("missing modality `{modality}` for sample {sample}")]
    MissingModality { modality: &'static str, sample: String },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("non-finite loss at iteration {iteration}; diagnostics written to {dump:?}")]
    NonFiniteLoss { iteration: usize, dump: Option<PathBuf> },

    #[error("{0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn value(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Value { op, detail: detail.into() }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Serialization(format!("image: {e}"))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(format!("json: {e}"))
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serialization(format!("toml: {e}"))
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Serialization(format!("toml: {e}"))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(format!("csv: {e}"))
    }
}

impl From<safetensors::SafeTensorError> for Error {
    fn from(e: safetensors::SafeTensorError) -> Self {
        Error::Serialization(format!("checkpoint: {e}"))
    }
}
