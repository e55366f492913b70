use std::path::PathBuf;

/// Errors produced by the forecasting engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("malformed manifest: {0}")]
    ManifestParse(String),

    #[error("flow binary length mismatch: expected {expected} values, found {actual}")]
    FlowLengthMismatch { expected: usize, actual: usize },

    #[error("checksum mismatch for {path}: manifest says {expected}, file hashes to {actual}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("malformed externals file: {0}")]
    ExternalsParse(String),

    #[error("malformed checkpoint: {0}")]
    CheckpointParse(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
