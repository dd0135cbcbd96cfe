use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("config error{}: {message}", location(.key, .line))]
    Config {
        key: Option<String>,
        line: Option<usize>,
        message: String,
    },

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("routing unstable for finite differences: {0}")]
    Unstable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn location(key: &Option<String>, line: &Option<usize>) -> String {
    match (key, line) {
        (Some(k), Some(l)) => format!(" (key `{k}`, line {l})"),
        (Some(k), None) => format!(" (key `{k}`)"),
        (None, Some(l)) => format!(" (line {l})"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config {
            key: None,
            line: None,
            message: msg.into(),
        }
    }

    pub(crate) fn config_key(key: &str, msg: impl Into<String>) -> Self {
        Error::Config {
            key: Some(key.to_string()),
            line: None,
            message: msg.into(),
        }
    }
}
