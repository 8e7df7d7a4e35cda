//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("timestep {t} out of range 1..={t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("bad volume format in {path}: {reason}")]
    VolumeFormat { path: String, reason: String },

    #[error("truncated volume in {path}: {reason}")]
    VolumeTruncated { path: String, reason: String },

    #[error("invalid normalization range: hi={hi} must exceed lo={lo}")]
    BadRange { lo: f64, hi: f64 },

    #[error("phantom generation failed: {0}")]
    GenerationFailed(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("artifact already exists: {0} (pass overwrite to replace)")]
    AlreadyExists(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
