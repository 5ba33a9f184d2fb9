use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Integrity { path: PathBuf, message: String },
    #[error("{path}:{line}: key {key:?}: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        key: String,
        message: String,
    },
    #[error("{0}")]
    Usage(String),
    #[error("no features for video {0:?}")]
    MissingFeatures(String),
    #[error(transparent)]
    Core(#[from] tgshuffle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Process exit code: 2 for usage and configuration problems, 3 for
    /// numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use tgshuffle_core::Error as C;
        match self {
            Error::Usage(_) | Error::Config { .. } => 2,
            Error::Core(C::Config(_) | C::WordNotFound(_)) => 2,
            Error::Core(C::NonFinite { .. }) => 3,
            _ => 1,
        }
    }
}
