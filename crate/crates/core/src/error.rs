use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate hand: wrist to middle-MCP distance {distance:.3e} is below {epsilon:.3e}")]
    DegenerateHand { distance: f64, epsilon: f64 },

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("batch too small for batch normalization: {0} rows (need at least 2)")]
    BatchTooSmall(usize),

    #[error("{}:{line}: {reason}", path.display())]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("invalid pose {name}: {reason}")]
    InvalidPose { name: String, reason: String },

    #[error("unknown character {0:?} in word")]
    UnknownCharacter(char),

    #[error("unknown pose {0:?}")]
    UnknownPose(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no hands in frame")]
    NoHands,

    #[error("insufficient data: class {class:?} has {available} samples, {required} required")]
    InsufficientData {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("label mismatch: {0}")]
    LabelMismatch(String),

    #[error("model file checksum mismatch")]
    Checksum,

    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable tag, used by the HTTP layer.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DegenerateHand { .. } => "degenerate_hand",
            Error::InvalidFrame(_) => "invalid_frame",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::BatchTooSmall(_) => "batch_too_small",
            Error::Parse { .. } => "parse_error",
            Error::InvalidPose { .. } => "invalid_pose",
            Error::UnknownCharacter(_) => "unknown_character",
            Error::UnknownPose(_) => "unknown_pose",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NoHands => "no_hands",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::LabelMismatch(_) => "label_mismatch",
            Error::Checksum => "checksum_error",
            Error::Version { .. } => "version_error",
            Error::ModelFormat(_) => "model_format",
            Error::Io(_) => "io_error",
        }
    }
}
