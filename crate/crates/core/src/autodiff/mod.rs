//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Everything learned by the estimator lives in a [`ParameterSet`]; a forward
//! pass binds parameters onto a fresh [`Tape`], records primitive ops, and a
//! single [`Tape::backward`] sweep yields gradients for [`adam_step`].
//!
//! Broadcasting is limited to exact shape matches or a scalar operand. Row
//! broadcasting of biases and latents goes through the explicit
//! [`Tape::add_bias`] and [`Tape::repeat_rows`] ops.

use alloc::string::String;
use alloc::vec::Vec;

mod adam;
pub mod checkpoint;
mod dist;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, StepStatus, DEFAULT_LEARNING_RATE, DEFAULT_WEIGHT_DECAY};
pub use dist::{diag_gaussian_kl, gaussian_nll, reparameterized_sample, softplus_variance, VARIANCE_FLOOR};
pub use params::ParameterSet;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid axis {axis} for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
    #[error("invalid column slice {start}+{len} of shape {shape:?}")]
    BadSlice {
        start: usize,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("variance must be strictly positive (found {0})")]
    NonPositiveVariance(f64),
    #[error("Adam hyperparameters out of range")]
    InvalidHyperparameter,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
