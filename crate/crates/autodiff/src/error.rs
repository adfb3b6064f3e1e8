use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op}: input outside the function domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("loss must be a 1x1 tensor, got {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },

    #[error("tensor data has {len} values but shape {shape:?} needs {expected}")]
    BadLength {
        len: usize,
        shape: [usize; 2],
        expected: usize,
    },

    #[error("function is not deterministic: {first} then {second} at identical parameters")]
    NonDeterministic { first: f64, second: f64 },
}
