use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("batch norm in train mode needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; build a fresh graph for another pass")]
    BackwardTwice,

    #[error("non-finite gradient for parameter {param} at element {index}: {value}")]
    NonFiniteGradient {
        param: usize,
        index: usize,
        value: f64,
    },

    #[error("gradient list does not match parameters: {0}")]
    GradientMismatch(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}
