use std::path::Path;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Input data that cannot be used (malformed records, inconsistent
    /// metadata, duplicate ranking entries).
    #[error("{0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { stage: String, path: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Numerical(_) => 4,
            Error::Io { .. } | Error::Data(_) => 1,
        }
    }
}

impl From<struid_numerics::NumericsError> for Error {
    fn from(e: struid_numerics::NumericsError) -> Self {
        match e {
            struid_numerics::NumericsError::Io { path, source } => Error::Io { path, source },
            struid_numerics::NumericsError::Format(m) => Error::Data(m),
        }
    }
}
