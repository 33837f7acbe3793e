use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unrecognized stage token {token:?} at epoch {index}")]
    UnknownStage { token: String, index: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("incompatible parameters: {}", .0.join(", "))]
    IncompatibleParameters(alloc::vec::Vec<String>),
    #[error("subject leakage: {0}")]
    SubjectLeak(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
