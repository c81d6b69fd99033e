use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input component {index} = {value} outside [{lower}, {upper}]")]
    InputOutOfBounds {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("integration produced a non-finite state at stage {stage}")]
    Integration { stage: usize },
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("environment slot {slot} out of range (n_e = {n_env})")]
    SlotOutOfRange { slot: usize, n_env: usize },
    #[error("invalid range for {what}[{index}]: [{lower}, {upper}]")]
    InvalidRange {
        what: &'static str,
        index: usize,
        lower: f64,
        upper: f64,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at batch sample {sample} (joint state {xi:?})")]
    NonFiniteLoss { sample: usize, xi: Vec<f64> },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from user-supplied input (bad config, bad
    /// dimensions) rather than a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InputOutOfBounds { .. }
                | Error::Shape { .. }
                | Error::SlotOutOfRange { .. }
                | Error::InvalidRange { .. }
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            what,
            expected,
            actual,
        })
    }
}

pub(crate) fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what })
    }
}
