//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("backward already ran on this graph; zero gradients and rebuild before calling again")]
    DoubleBackward,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("distribution does not sum to 1 (sum = {sum}); cannot compute entropy")]
    NotNormalized { sum: f64 },

    #[error("input contains no real tokens (all positions are padding)")]
    AllPadding,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("config file error: {0}")]
    ConfigFile(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("refusing to overwrite existing output at {0}; pass --overwrite to replace it")]
    WouldClobber(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI. Each error category maps to a
    /// distinct code so callers can script against failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::ConfigFile(_) => 3,
            Error::Data(_) => 4,
            Error::Checkpoint(_) => 5,
            Error::WouldClobber(_) => 6,
            _ => 1,
        }
    }
}
