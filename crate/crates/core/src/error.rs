use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("scale mismatch: coarse {coarse:?} is not half of fine {fine:?}")]
    ScaleMismatch { fine: (usize, usize), coarse: (usize, usize) },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("pixel ({row}, {col}) outside a {rows}x{cols} window image")]
    OutOfWindow {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("action is missing its raw samples")]
    MissingRawSamples,

    #[error("missing log-probability component `{0}`")]
    MissingComponent(&'static str),

    #[error("episode is incomplete: last transition is not terminal")]
    IncompleteEpisode,

    #[error("cache does not match network: {0}")]
    CacheMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
