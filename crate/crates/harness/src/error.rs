use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config {location}: unknown key `{key}`")]
    UnknownKey { location: String, key: String },

    #[error("config {location}: `{key}` expects {expected}, got `{value}`")]
    TypeMismatch { location: String, key: String, expected: &'static str, value: String },

    #[error("config: missing required field `{0}`")]
    MissingField(String),

    #[error("config {location}: {message}")]
    Syntax { location: String, message: String },

    #[error("checkpoint {path}: bad magic bytes, not a checkpoint file")]
    BadMagic { path: PathBuf },

    #[error("checkpoint {path}: format version {found}, this build reads version {expected}")]
    Version { path: PathBuf, found: u32, expected: u32 },

    #[error("checkpoint {path}: truncated while reading {what}")]
    Truncated { path: PathBuf, what: String },

    #[error("checkpoint {path} does not fit the configured model at `{name}`: stored {found}, expected {expected}")]
    ShapeMismatch { path: PathBuf, name: String, expected: String, found: String },

    #[error("checkpoint {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("training diverged at update {update}: {source}; last good checkpoint at {checkpoint}")]
    Diverged { update: usize, checkpoint: PathBuf, source: mam_core::Error },

    #[error("verification failed: {0}")]
    VerifyFailed(String),

    #[error(transparent)]
    Core(#[from] mam_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::UnknownKey { .. } | Self::TypeMismatch { .. } | Self::MissingField(_) | Self::Syntax { .. } => 2,
            Self::BadMagic { .. } | Self::Format { .. } => 3,
            Self::Version { .. } => 4,
            Self::Truncated { .. } => 5,
            Self::ShapeMismatch { .. } => 6,
            Self::Diverged { .. } => 7,
            Self::VerifyFailed(_) => 8,
            Self::Core(_) | Self::Io { .. } | Self::Csv(_) | Self::Json(_) => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
