//! Dense tensors, parameters and a reverse-mode tape.

pub mod kernels;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{SeqLayout, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape {left:?} is incompatible with {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {} values but {len} were given", .shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {shape:?} has a zero dimension")]
    ZeroDimension { shape: Vec<usize> },
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// `ln Σ exp(vᵢ)`, shifted by the maximum. All `-∞` inputs give `-∞`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64, NumericsError> {
    if values.is_empty() {
        return Err(NumericsError::Contract("log_sum_exp of an empty list".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Two-term [`log_sum_exp`] for inner loops.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}
