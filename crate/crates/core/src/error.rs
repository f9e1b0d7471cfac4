use thiserror::Error;

use crate::types::Role;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{role:?} index {id} out of range")]
    IndexOutOfRange { role: Role, id: usize },
    #[error("bid field {field} is not representable in an unsigned {bits}-bit field")]
    FieldOverflow { field: &'static str, bits: u32 },
    #[error("bit stream has length {got}, expected {expected}")]
    StreamLength { got: usize, expected: usize },
    #[error("truncated canonical encoding")]
    Truncated,
    #[error("{0} trailing bytes after canonical encoding")]
    TrailingBytes(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("liveness failure: {0}")]
    Liveness(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
