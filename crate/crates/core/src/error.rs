use std::io;

use thiserror::Error;

use crate::dp::PrivacyParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("invalid privacy parameters: {0}")]
    InvalidParams(String),
    #[error("invalid clamp bounds [{lower}, {upper}]")]
    InvalidBounds { lower: f64, upper: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid noise scale {0}")]
    InvalidScale(f64),
    #[error("the Gaussian mechanism requires delta > 0")]
    GaussianRequiresDelta,
    #[error("privacy budget exceeded: spending {requested} on top of {spent} would exceed {budget}")]
    BudgetExceeded {
        requested: PrivacyParams,
        spent: PrivacyParams,
        budget: PrivacyParams,
    },
    #[error("datasets differ in more than one record")]
    NotAdjacent,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: u32, num_classes: usize },
    #[error("forward cache does not match network: {0}")]
    Cache(String),
    #[error("gradient contains non-finite entries")]
    InvalidGradient,
    #[error("format error: {0}")]
    Format(String),
    #[error("test fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("timed out waiting for {0}")]
    TimedOut(String),
    #[error("session aborted ({code:?}): {text}")]
    Aborted {
        code: crate::federation::AbortCode,
        text: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
