use std::path::PathBuf;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] flowprosody::Error),

    #[error("invalid config {path}: {reason}")]
    Config { path: PathBuf, reason: String },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Config { .. } => "config",
            CliError::MissingFile(_) => "missing-file",
            CliError::Io { .. } => "io",
            CliError::Malformed { .. } => "corrupt-file",
            CliError::HashMismatch { .. } => "hash-mismatch",
            CliError::Usage(_) => "usage",
        }
    }

    /// Single-line form written to stderr: `error[<category>]: <message>`.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("error[{}]: {msg}", self.category())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return CliError::MissingFile(path);
        }
        CliError::Io { path, source }
    }
}

/// Core errors for missing inputs are reported as `missing-file`.
pub(crate) fn lift(e: flowprosody::Error) -> CliError {
    match e {
        flowprosody::Error::Io { path, source } => CliError::io(path, source),
        other => CliError::Core(other),
    }
}
