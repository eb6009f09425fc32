use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("value {value} outside [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },

    #[error("reducible chain: states {unreachable:?} unreachable from state {from}")]
    Reducible { from: usize, unreachable: Vec<usize> },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite gradient in layer {layer}")]
    NonFinite { layer: usize },

    #[error("invalid action {action}: valid actions are 0..={max}")]
    InvalidAction { action: usize, max: usize },

    #[error("state space too large for enumeration: |S| = {size} exceeds {limit}")]
    StateSpaceTooLarge { size: u128, limit: u128 },

    #[error("simulator logic error: {0}")]
    Logic(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("malformed file {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }
}
