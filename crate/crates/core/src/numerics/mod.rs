//! Dense `f64` tensors and a dynamic reverse-mode tape.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheck, GRAD_CHECK_FLOOR};
pub use tape::{sigmoid, Gradients, Segment, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{Fnv64, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data of length {len} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("tensor does not require grad")]
    FrozenGrad,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Untracked convenience wrappers over single tape ops.
pub mod ops {
    use super::{Tape, Tensor, TensorError};

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        a.matmul(b)
    }

    pub fn relu(x: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.relu(v)?;
        Ok(tape.tensor(y))
    }

    pub fn softmax_rows(x: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax_rows(v)?;
        Ok(tape.tensor(y))
    }

    pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let (xv, g, b) = (tape.constant(x), tape.constant(gain), tape.constant(bias));
        let y = tape.layer_norm(xv, g, b)?;
        Ok(tape.tensor(y))
    }

    pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let (p, t) = (tape.constant(pred), tape.constant(target));
        let l = tape.mse_loss(p, t)?;
        Ok(tape.value(l)[0])
    }
}
