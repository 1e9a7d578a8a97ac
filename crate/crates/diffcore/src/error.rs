use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric fault in {op}: non-finite value")]
    NumericFault { op: String },
    #[error("gradient check invalid: {0}")]
    CheckInvalid(String),
}

impl DiffError {
    pub fn contract(msg: impl Into<String>) -> Self {
        DiffError::Contract(msg.into())
    }

    pub fn numeric(op: impl Into<String>) -> Self {
        DiffError::NumericFault { op: op.into() }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        DiffError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DiffError>;
