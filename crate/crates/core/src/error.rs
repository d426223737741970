use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while ingesting data, building model structures or sampling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing input file: {0}")]
    MissingInput(PathBuf),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("rank-deficient design at time {time}: rank {rank} < {columns} columns")]
    RankDeficient { time: usize, rank: usize, columns: usize },

    #[error("requested rank {requested} exceeds maximum admissible rank {max}")]
    RankTooLarge { requested: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite sampler state at iteration {iteration}: {what}")]
    NonFiniteState { iteration: usize, what: String },

    #[error("chain error: {0}")]
    Chain(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
