use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("validation error in {context}: {message}")]
    Validation { context: String, message: String },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("layer `{0}` cannot be used here: {1}")]
    UnsupportedLayer(String, String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("class {0} has no probe instances")]
    EmptyClass(usize),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("CAV training failed: {0}")]
    Training(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("snapshot corrupted: {0}")]
    Corruption(String),

    #[error("unsupported snapshot version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("failed to decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn validation(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { context: context.into(), message: message.into() }
    }
}
