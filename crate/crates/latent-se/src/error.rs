//! Crate-wide error type and the exit-code categories used by the CLI.

use std::path::PathBuf;
use thiserror::Error;

/// Exit-status category for a failed command.
///
/// `Config` maps to exit code 2, `Data` to 3, `Runtime` to 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Runtime,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Runtime => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("input too short: {got} samples, need at least {need}")]
    InputTooShort { got: usize, need: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("token index {index} out of range for codebook size {size} (stage {stage})")]
    IndexOutOfRange {
        index: usize,
        size: usize,
        stage: usize,
    },

    #[error("model variant mismatch: operation requires {expected}, spec is {got}")]
    VariantMismatch { expected: String, got: String },

    #[error("wrong input kind for variant {variant}: expected {expected}")]
    WrongInputKind { variant: String, expected: String },

    #[error("sequence length {got} exceeds maximum {max}")]
    SequenceTooLong { got: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("unsupported WAV format: field `{field}` is {value}, expected {expected}")]
    UnsupportedWav {
        field: String,
        value: String,
        expected: String,
    },

    #[error("malformed WAV file: {0}")]
    MalformedWav(String),

    #[error("sample rate mismatch: input is {got} Hz, codec configured for {expected} Hz")]
    SampleRateMismatch { got: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training diverged: non-finite loss at {context}")]
    Diverged { context: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Which exit-status category this error belongs to.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Usage(_) => {
                ErrorCategory::Config
            }
            Error::UnsupportedWav { .. }
            | Error::MalformedWav(_)
            | Error::MalformedCheckpoint(_)
            | Error::EmptyDataset
            | Error::MissingFile(_)
            | Error::InputTooShort { .. }
            | Error::SampleRateMismatch { .. }
            | Error::Io { .. } => ErrorCategory::Data,
            _ => ErrorCategory::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
