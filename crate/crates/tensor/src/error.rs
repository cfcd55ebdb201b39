use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    Length { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero-sized dimension")]
    EmptyDim(Vec<usize>),
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
