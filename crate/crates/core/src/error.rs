use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied something that violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// An object was used before it reached the required state.
    #[error("invalid state: {0}")]
    State(String),

    /// A forward pass or objective produced NaN/inf.
    ///
    /// `trajectory` carries the objective values recorded before the failure.
    #[error("non-finite value encountered: {message}")]
    Numerical {
        message: String,
        trajectory: Vec<f64>,
    },

    #[error("localization ratio undefined: difference map carries no mass")]
    UndefinedRatio,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>, trajectory: Vec<f64>) -> Self {
        Error::Numerical {
            message: msg.into(),
            trajectory,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
