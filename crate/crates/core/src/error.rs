use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input value was non-finite or otherwise outside the domain of the operation.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// The requested format or configuration is not supported by this operation.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// A configuration document or quantization map is incomplete or inconsistent.
    #[error("config error: {0}")]
    Config(String),
    /// Tensor shapes do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Block boundaries of two GEMM operands do not line up along the reduction dimension.
    #[error("block alignment error: {0}")]
    BlockAlignment(String),
    /// A binary container could not be decoded.
    #[error("decode error: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, Error>;
