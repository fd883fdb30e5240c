//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor/batch shape does not match what the operation expects.
    ShapeMismatch { expected: String, got: String },
    /// Two arrays that must have equal length do not.
    LengthMismatch { left: usize, right: usize },
    /// An operation received an empty batch or dataset.
    EmptyBatch,
    /// Stage has no training data.
    EmptyStage,
    /// UAP generation subset is empty.
    EmptySubset,
    /// HDP training at stage >= 2 requires a non-empty UAP pool.
    EmptyPool,
    /// BLEND manipulation requires a donor image.
    MissingDonor,
    /// A loss component is NaN or infinite.
    NonFinite(String),
    /// Gradient blew up to NaN/inf during perturbation refinement.
    NonFiniteGradient,
    /// Checkpoint/UAP file has an unsupported format version.
    VersionMismatch { expected: u32, got: u32 },
    /// File is not a valid artifact of the expected kind.
    CorruptFile(String),
    /// Pool already contains a perturbation for this stage.
    DuplicateStage(u32),
    /// Pool stages must be appended in order 1, 2, 3, ... without gaps.
    StageOrder { expected: u32, got: u32 },
    /// Buffer selection asked for more samples than the stage holds.
    KTooLarge { k: usize, available: usize },
    /// AUC needs at least one positive and one negative label.
    SingleClass,
    /// Attempted to update the parameters of a frozen detector.
    FrozenDetector,
    /// Metric matrix is missing entries required by the summary.
    IncompleteMatrix(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// JSON (de)serialization failure.
    Json(serde_json::Error),
    /// Invalid configuration value.
    InvalidConfig(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Error::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            Error::EmptyBatch => write!(f, "empty batch"),
            Error::EmptyStage => write!(f, "stage has no training data"),
            Error::EmptySubset => write!(f, "empty UAP generation subset"),
            Error::EmptyPool => write!(f, "UAP pool is empty"),
            Error::MissingDonor => write!(f, "BLEND manipulation requires a donor image"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::NonFiniteGradient => write!(f, "non-finite gradient"),
            Error::VersionMismatch { expected, got } => {
                write!(f, "format version mismatch: expected {expected}, got {got}")
            }
            Error::CorruptFile(why) => write!(f, "corrupt file: {why}"),
            Error::DuplicateStage(s) => write!(f, "pool already holds a UAP for stage {s}"),
            Error::StageOrder { expected, got } => {
                write!(f, "pool stages must be contiguous: expected {expected}, got {got}")
            }
            Error::KTooLarge { k, available } => {
                write!(f, "buffer size {k} exceeds stage train size {available}")
            }
            Error::SingleClass => write!(f, "AUC undefined: labels contain a single class"),
            Error::FrozenDetector => write!(f, "frozen detector cannot be updated"),
            Error::IncompleteMatrix(why) => write!(f, "incomplete eval matrix: {why}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
            Error::InvalidConfig(why) => write!(f, "invalid config: {why}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
