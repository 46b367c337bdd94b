use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operands whose dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A configuration that violates its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// A memory pool or buffer cannot hold the request.
    #[error("capacity exhausted: {0}")]
    Capacity(String),

    #[error("degenerate samples: {0}")]
    Degenerate(String),

    #[error("model with zero slope is not invertible")]
    NonInvertible,

    #[error("unknown request {0}")]
    UnknownRequest(u64),

    #[error("request {0} already exists")]
    DuplicateRequest(u64),

    #[error("block table of request {0} has no partially filled block")]
    NeedsBlock(u64),

    #[error("too many requests for exhaustive search: {0} (max {1})")]
    TooLarge(usize, usize),
}

impl Error {
    /// Stable machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::Capacity(_) => "capacity",
            Error::Degenerate(_) => "degenerate",
            Error::NonInvertible => "non_invertible",
            Error::UnknownRequest(_) => "unknown_request",
            Error::DuplicateRequest(_) => "duplicate_request",
            Error::NeedsBlock(_) => "needs_block",
            Error::TooLarge(..) => "too_large",
        }
    }
}
