use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/image extents do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller-side precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file or byte stream could not be decoded.
    #[error("decode error at byte {offset}: {msg}")]
    Decode { offset: usize, msg: String },

    /// Invalid configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn decode(offset: usize, msg: impl Into<String>) -> Self {
        Error::Decode {
            offset,
            msg: msg.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
