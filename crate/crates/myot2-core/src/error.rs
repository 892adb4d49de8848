//! Error type shared across the crate.
//!
//! Contract violations inside the autodiff graph (shape mismatches, non-finite
//! values) panic, mirroring the fact that they are programmer errors. Data
//! dependent failures (malformed files, degenerate inputs) surface as
//! [`Error`] values.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("constant volume: min equals max, nothing to normalize")]
    ConstantVolume,

    #[error("zero variance: correlation undefined")]
    ZeroVariance,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("unknown parameter: {0}")]
    UnknownParam(String),

    #[error("duplicate parameter: {0}")]
    DuplicateParam(String),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
