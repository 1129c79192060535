//! Error type shared across the crate.

/// Errors raised by tensors, models, samplers, and the harness.
#[derive(Debug, thiserror::Error)]
pub enum UniregError {
    /// Shapes of operands do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A value is outside an operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An experiment configuration is invalid.
    #[error("invalid config: {0}")]
    Config(String),
    /// A file payload does not match its declared format.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, UniregError>;
