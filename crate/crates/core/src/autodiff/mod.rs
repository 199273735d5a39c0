//! Dense tensors with a reverse-mode tape.
//!
//! The tape records rank-2 primitives and replays them in reverse. Second
//! order information for tanh networks is obtained by emitting the analytic
//! layer-wise input gradient as ordinary tape nodes (see [`mlp`]), so the
//! result stays differentiable with respect to the parameters.

pub mod mlp;
mod tape;
mod tensor;

pub use tape::{Axis, Gradients, Node, NodeId, Op, Tape};
pub use tensor::Tensor;

pub(crate) use tensor::gemm;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: range {start}..{start}+{len} exceeds extent {extent}")]
    OutOfRange {
        op: &'static str,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("{op}: empty operand list")]
    Empty { op: &'static str },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must hold a single value, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("input gradient requires a scalar-output network, got {outputs} outputs")]
    NonScalarOutput { outputs: usize },
    #[error("network needs at least one hidden layer")]
    NoHiddenLayer,
}
