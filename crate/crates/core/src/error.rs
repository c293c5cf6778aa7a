use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Array or tensor shapes disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Invalid configuration; usually a usage error at the CLI.
    #[error("configuration error: {0}")]
    Config(String),
    /// A NaN or infinity showed up where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Malformed file content.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! domain {
    ($($arg:tt)*) => { $crate::error::Error::Domain(format!($($arg)*)) };
}

macro_rules! shape {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

pub(crate) use domain;
pub(crate) use shape;
