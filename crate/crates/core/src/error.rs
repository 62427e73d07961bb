use alloc::string::String;
use alloc::vec::Vec;

/// Failure categories shared across the core crate.
///
/// `Dimension` is a shape incompatibility between operands, `Contract` a
/// violated precondition on a scalar argument, `Protocol` an experiment-level
/// problem with the data itself (missing class, insufficient pool), and
/// `Validation` a model specification whose shape chain does not close.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid model spec at {layer}: {detail}")]
    Validation { layer: String, detail: String },
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
