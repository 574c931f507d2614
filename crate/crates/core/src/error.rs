use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("gradient probe failed: {0}")]
    Probe(String),

    #[error("config error at line {line}, key `{key}`: {msg}")]
    Config { line: usize, key: String, msg: String },

    #[error("load error: {0}")]
    Load(String),

    #[error("training aborted at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
