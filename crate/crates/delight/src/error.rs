use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller broke an API contract (shape mismatch, out-of-range index, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A dataset on disk is malformed or incomplete.
    #[error("dataset error: {0}")]
    Data(String),

    /// No scene satisfies a triplet policy predicate for the given anchor.
    #[error("triplet sampling failed: {0}")]
    Sampling(String),

    /// Training produced a non-finite loss.
    #[error("numeric failure at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 1,
            Error::Data(_) | Error::Sampling(_) | Error::Io { .. } | Error::ImageDecode { .. } => 2,
            Error::NonFinite { .. } => 3,
            Error::Serde(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
