//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by tensor math, model construction, training, analysis
/// and the on-disk formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("gradient supplied for frozen parameter `{0}`")]
    FreezeViolation(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("batch norm: {0}")]
    BatchNorm(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("container format error: {0}")]
    Format(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
