use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible split: {what} requires {required} but only {available} available")]
    Infeasible {
        what: String,
        required: usize,
        available: usize,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("invalid mask value {value} at flat index {index}")]
    InvalidMask { value: u8, index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid spacing: {0}")]
    Spacing(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing baseline entry for class {class}, slice {slice}")]
    MissingBaseline { class: String, slice: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category used on the CLI diagnostics stream.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Geometry(_) | Error::Config(_) | Error::Json(_) => "config",
            Error::Infeasible { .. } => "split",
            Error::MalformedHeader(_) | Error::Truncated { .. } | Error::InvalidMask { .. } | Error::Shape(_) => {
                "format"
            }
            Error::Spacing(_) | Error::Invalid(_) => "input",
            Error::NonFinite(_) => "divergence",
            Error::MissingBaseline { .. } => "eval",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
