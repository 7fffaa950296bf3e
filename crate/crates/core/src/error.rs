use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is rank deficient or non-finite (smallest singular value {0:e})")]
    DegenerateMatrix(f64),

    #[error("histogram has {got} bins, model expects {expected}")]
    BinCountMismatch { expected: usize, got: usize },

    #[error("sample depths must be strictly increasing along each ray (ray {ray})")]
    NonMonotonicDepths { ray: usize },

    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),

    #[error("frame {0} requires a pose file but none was found")]
    MissingPose(PathBuf),

    #[error("malformed pose file {path}: {reason}")]
    MalformedPoseFile { path: PathBuf, reason: String },

    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("malformed scene data {path}: {reason}")]
    MalformedScene { path: PathBuf, reason: String },

    #[error("empty list")]
    EmptyList,

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint config does not match the requested model: key `{key}` is `{found}`, expected `{expected}`")]
    CheckpointConfigMismatch {
        key: String,
        found: String,
        expected: String,
    },

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfigValue { key: String, reason: String },

    #[error("experiment directory is in use: lock file {0} exists")]
    Locked(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code for command-line reporting.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DegenerateMatrix(_) => "DEGENERATE_MATRIX",
            Error::BinCountMismatch { .. } => "BIN_COUNT_MISMATCH",
            Error::NonMonotonicDepths { .. } => "NON_MONOTONIC_DEPTHS",
            Error::ShapeMismatch(..) => "SHAPE_MISMATCH",
            Error::MissingPose(_) => "MISSING_POSE",
            Error::MalformedPoseFile { .. } => "MALFORMED_POSE_FILE",
            Error::UnreadableImage { .. } => "UNREADABLE_IMAGE",
            Error::MalformedScene { .. } => "MALFORMED_SCENE",
            Error::EmptyList => "EMPTY_LIST",
            Error::Checkpoint { .. } => "CHECKPOINT",
            Error::CheckpointConfigMismatch { .. } => "CHECKPOINT_CONFIG_MISMATCH",
            Error::UnknownConfigKey(_) => "UNKNOWN_CONFIG_KEY",
            Error::InvalidConfigValue { .. } => "INVALID_CONFIG_VALUE",
            Error::Locked(_) => "LOCKED",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::Io(_) => "IO",
        }
    }
}
