use std::path::PathBuf;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid reward group: {0}")]
    InvalidGroup(String),

    #[error("unsupported reward: {0}")]
    UnsupportedReward(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid rollout: {0}")]
    InvalidRollout(String),

    #[error("empty batch")]
    EmptyBatch,

    /// Every group violated the `0 < k < G` constraint; the caller should resample.
    #[error("no group survived the 0 < k < G filter")]
    EmptyAfterFilter,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
