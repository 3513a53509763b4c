//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, DdrError>;

/// Errors produced anywhere in the pipeline.
#[derive(Debug)]
pub enum DdrError {
    /// Tensor/parameter shape disagreement. The message names the offending path.
    Shape(String),
    /// Invalid argument or violated config invariant.
    Invalid(String),
    /// Non-finite value where a finite one is required.
    Numeric(String),
    /// A named parameter or gradient is missing.
    MissingParam(String),
    /// Malformed input data, with the file and 1-based line that failed.
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    /// Checkpoint format version not supported by this build.
    CheckpointVersion { found: u32, supported: u32 },
    /// Checkpoint kind tag does not match what the caller asked for.
    CheckpointKind { found: String, expected: String },
    /// Checkpoint bytes are internally inconsistent (manifest vs blob).
    CheckpointCorrupt(String),
    /// Two configs that must agree do not.
    ConfigMismatch(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for DdrError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DdrError::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            DdrError::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            DdrError::Numeric(msg) => write!(f, "non-finite value: {msg}"),
            DdrError::MissingParam(name) => write!(f, "missing parameter: {name}"),
            DdrError::Parse {
                path,
                line,
                message,
            } => write!(f, "{path}:{line}: {message}"),
            DdrError::CheckpointVersion { found, supported } => write!(
                f,
                "checkpoint format version {found} not supported (this build reads version {supported})"
            ),
            DdrError::CheckpointKind { found, expected } => {
                write!(f, "checkpoint kind is `{found}`, expected `{expected}`")
            }
            DdrError::CheckpointCorrupt(msg) => write!(f, "corrupt checkpoint: {msg}"),
            DdrError::ConfigMismatch(msg) => write!(f, "config mismatch: {msg}"),
            DdrError::Io(err) => write!(f, "io error: {err}"),
            DdrError::Json(err) => write!(f, "json error: {err}"),
        }
    }
}

impl std::error::Error for DdrError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DdrError::Io(err) => Some(err),
            DdrError::Json(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for DdrError {
    fn from(err: std::io::Error) -> Self {
        DdrError::Io(err)
    }
}

impl From<serde_json::Error> for DdrError {
    fn from(err: serde_json::Error) -> Self {
        DdrError::Json(err)
    }
}
