use std::io;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied arguments that violate an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A fixed-size resource (KV cache, 64-bit tree mask) would overflow.
    #[error("capacity exceeded: {what} needs {needed}, limit is {limit}")]
    Capacity {
        what: &'static str,
        needed: usize,
        limit: usize,
    },

    /// A token id outside the vocabulary showed up in a token stream.
    #[error("token id {id} at offset {offset} is outside vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        offset: u64,
        vocab_size: usize,
    },

    /// Coverage is undefined for an empty frequency table.
    #[error("coverage is undefined when the frequency table is empty")]
    UndefinedCoverage,

    /// Internal invariant broken, e.g. a drafted token with zero draft probability.
    #[error("internal consistency violated: {0}")]
    Consistency(String),

    /// Malformed checkpoint, token stream or ranked-subset file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
