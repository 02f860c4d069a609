use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    LengthMismatch {
        shape: alloc::vec::Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: alloc::vec::Vec<usize>,
        right: alloc::vec::Vec<usize>,
    },
    #[error("domain error in {0}")]
    Domain(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(alloc::vec::Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
    #[error("missing gradient for trainable parameter {0}")]
    MissingGradient(String),
    #[error("unknown layer or parameter {0}")]
    Unknown(String),
    #[error("input {size}x{size} is too small for the {preset} backbone (minimum {min}x{min})")]
    InputTooSmall {
        preset: &'static str,
        size: usize,
        min: usize,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("{0}")]
    Source(String),
}
