use thiserror::Error;

/// Errors raised by the simulated persistent-memory arena.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PmError {
    #[error("out of space: requested {requested} bytes at cursor {cursor}, capacity {capacity}")]
    OutOfSpace {
        requested: u64,
        cursor: u64,
        capacity: u64,
    },
    #[error("access [{offset}, {offset}+{len}) outside of region of size {size}")]
    OutOfRange { offset: u64, len: u64, size: u64 },
    #[error("offset {0} is not 8-byte aligned")]
    Misaligned(u64),
    #[error("invalid arena configuration: {0}")]
    Config(String),
    #[error("crash enumeration over {dirty} dirty words exceeds the bound of {max}")]
    EnumerationExplosion { dirty: usize, max: usize },
}

/// Errors raised by node- and tree-level operations.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error(transparent)]
    Pm(#[from] PmError),
    #[error("node capacity {0} is not a power of two greater than one")]
    NotPowerOfTwo(u64),
    #[error("node is full and must be split")]
    MustSplit,
    #[error("key {0} already present")]
    Duplicate(u64),
    #[error("key {0} not found")]
    NotFound(u64),
    #[error("value 0 is reserved for empty slots")]
    NullValue,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("corrupt image: {0}")]
    Corruption(String),
}

pub type Result<T, E = TreeError> = std::result::Result<T, E>;
