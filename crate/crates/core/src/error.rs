use std::path::PathBuf;

/// Errors raised across the library. Variants map onto the failure classes
/// the CLI turns into exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("binding error: {0}")]
    Binding(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("dataset error in {entry}: {message}")]
    Dataset { entry: String, message: String },
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn dataset(entry: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Dataset { entry: entry.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
