use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: graph already consumed")]
    GraphConsumed,

    #[error("optimizer: parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),

    #[error("format mismatch: expected {expected}, found {found}")]
    FormatVersion { expected: String, found: String },

    #[error("hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("model is untrained: {0}")]
    Untrained(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } | Error::Diverged(_) => "numeric",
            Error::NonScalarLoss(_) | Error::GraphConsumed | Error::MissingGrad(_) => "autodiff",
            Error::InvalidArgument(_) | Error::InvalidSpec(_) => "invalid-argument",
            Error::FormatVersion { .. } => "version-mismatch",
            Error::HashMismatch { .. } => "hash-mismatch",
            Error::Corrupt { .. } => "corrupt-file",
            Error::Untrained(_) => "untrained",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
