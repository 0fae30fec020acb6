use thiserror::Error;

pub type Result<T, E = AdError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} holds {expected} values but {got} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("invalid shape {shape:?}: extents must be positive")]
    ZeroExtent { shape: Vec<usize> },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("matrix is not symmetric positive definite: pivot {pivot} is {value:e}")]
    NotSpd { pivot: usize, value: f64 },

    #[error("matrix is not symmetric: entry ({row}, {col}) differs from its transpose by {diff:e}")]
    NotSymmetric { row: usize, col: usize, diff: f64 },

    #[error("triangular matrix is singular: diagonal entry {index} is zero")]
    SingularTriangular { index: usize },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("variables belong to different tapes")]
    TapeMismatch,
}
