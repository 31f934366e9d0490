use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("shape {shape:?} holds {expected} elements but data has {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate camera pose: distance {distance} inside object bounding radius {radius}")]
    DegeneratePose { distance: f64, radius: f64 },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("clean accuracy gate failed: train {train:.4} (need {train_min}), test {test:.4} (need {test_min})")]
    CleanGate {
        train: f64,
        test: f64,
        train_min: f64,
        test_min: f64,
    },
    #[error("malformed {what} file: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("t statistic undefined: both samples have zero variance")]
    ZeroVariance,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Stable machine-readable kind, used by the CLI and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::DataLength { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegeneratePose { .. } => "degenerate_pose",
            Error::Diverged { .. } => "diverged",
            Error::CleanGate { .. } => "clean_gate",
            Error::Format { .. } => "format",
            Error::ZeroVariance => "zero_variance",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
