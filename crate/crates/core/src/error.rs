use std::path::PathBuf;

use thiserror::Error;

/// Parse and layout errors for the binary tensor format.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected \"EXPT\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("invalid shape {shape:?}: every dimension must be >= 1 and rank in 1..=255")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} holds {expected} elements but {found} values were given")]
    CountMismatch {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error("clip `{clip_id}`: invalid field `{field}`: {reason}")]
    Validation {
        clip_id: String,
        field: String,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("frozen base parameters changed (expected hash {expected}, found {found})")]
    FreezeViolation { expected: String, found: String },

    #[error("tempo undefined: need at least 2 beats, found {0}")]
    UndefinedTempo(usize),

    #[error("manifest pairing error: {0}")]
    Pairing(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(
        clip_id: impl Into<String>,
        field: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Validation {
            clip_id: clip_id.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a failure while running. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format { .. }
                | Error::Validation { .. }
                | Error::Config(_)
                | Error::Input(_)
                | Error::Pairing(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
