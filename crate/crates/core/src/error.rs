use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// The layout document is not well-formed JSON.
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    /// Missing field, wrong type, unknown field or an entity shape the schema forbids.
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },

    /// Well-typed document that breaks a layout rule.
    #[error("invariant violation at `{path}`: {message}")]
    Invariant { path: String, message: String },

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("mask row {row} admits no key, cannot be expressed as attention blocks")]
    EmptyMaskRow { row: usize },

    #[error("blocks overlap at query {query}, key {key}")]
    OverlappingBlocks { query: usize, key: usize },

    #[error("query row {0} is covered by no block")]
    UncoveredRow(usize),

    #[error("block {index} is empty or exceeds the sequence length {n}")]
    BadBlock { index: usize, n: usize },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
