use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric input contained NaN or infinity.
    #[error("non-finite input in {context}")]
    NonFiniteInput { context: &'static str },

    /// Operand shapes do not agree.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A configuration cannot be executed as given.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called in an invalid state.
    #[error("state error: {0}")]
    State(String),

    /// An input collection was empty where at least one element is required.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A binary payload does not match the expected file format.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
