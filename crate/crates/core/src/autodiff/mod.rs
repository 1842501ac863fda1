//! Define-by-run reverse-mode differentiation over dense rank-2 tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Each kernel appends a
//! node holding its output value; [`Graph::backward`] walks the nodes in
//! reverse creation order and accumulates vector-Jacobian products into the
//! inputs. Creation order is a valid topological order because a node can
//! only reference nodes that already exist.

mod gradcheck;
mod graph;
mod tensor;

use std::fmt;

pub use gradcheck::{grad_check, Coordinate, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Primitive, Var};
pub use tensor::Tensor;

/// Kernel identifiers, used in diagnostics and by [`Graph::primitive`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Matmul,
    Add,
    Sub,
    AddRow,
    MulRow,
    Hadamard,
    Scale,
    Transpose,
    SoftmaxRows,
    Gelu,
    Sigmoid,
    Log,
    LayerNorm,
    L2Norm,
    Mean,
    Sum,
    MeanRows,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    Gather,
    CrossEntropy,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::AddRow => "add-row",
            OpKind::MulRow => "mul-row",
            OpKind::Hadamard => "hadamard",
            OpKind::Scale => "multiply-by-scalar",
            OpKind::Transpose => "transpose",
            OpKind::SoftmaxRows => "row-softmax",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Log => "natural-log",
            OpKind::LayerNorm => "layer-normalization",
            OpKind::L2Norm => "l2-norm",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::MeanRows => "mean-rows",
            OpKind::ConcatRows => "concat-rows",
            OpKind::ConcatCols => "concat-cols",
            OpKind::SliceRows => "slice-rows",
            OpKind::SliceCols => "slice-cols",
            OpKind::Gather => "embedding-lookup",
            OpKind::CrossEntropy => "cross-entropy-with-logits",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{kind}: incompatible shapes {shapes:?}")]
    ShapeMismatch { kind: OpKind, shapes: Vec<Vec<usize>> },
    #[error("{kind}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { kind: OpKind, index: usize, bound: usize },
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{kind}: expected {expected} inputs, got {got}")]
    Arity { kind: OpKind, expected: usize, got: usize },
    #[error("non-finite value at tensor {tensor}, coordinate {index}")]
    NonFinite { tensor: usize, index: usize },
}
