use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shape/dimension violation; names the offending axis.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller broke an operation contract (wrong segment length,
    /// non-scalar backward seed, single-class score set, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid experiment or augmentation configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data (protocol lines, score files, WAV, feature files).
    #[error("data error: {0}")]
    Data(String),

    /// Parse failure at a known location within a file.
    #[error("parse error in {path} at {location}: {message}")]
    Parse {
        path: String,
        location: String,
        message: String,
    },

    /// Training or evaluation produced non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
