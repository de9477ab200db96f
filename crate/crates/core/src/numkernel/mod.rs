//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! Every value is computed eagerly when an op is recorded. [`Tape::grad`]
//! records the backward pass as ordinary ops, which is what makes
//! gradient-of-gradient terms (the embedding-gradient penalty) possible.
//!
//! ReLU's derivative at exactly zero is taken as zero.

mod sparse;
mod tape;
mod tensor;

pub use sparse::BlockSparse;
pub use tape::{CeTarget, Op, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("loss must be a single element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: not twice differentiable")]
    NotTwiceDifferentiable(&'static str),
    #[error("{0}: empty or inconsistent target rows")]
    EmptyTarget(&'static str),
    #[error("target index out of range for {rows} rows × {classes} classes")]
    TargetOutOfRange { rows: usize, classes: usize },
    #[error("{0}: cannot be recorded through the generic entry point")]
    Unsupported(&'static str),
}

pub type Result<T> = std::result::Result<T, NumError>;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    out
}

/// `‖a − b‖₂ / max(‖b‖₂, floor)`, the relative error used by gradient checks.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.sub(b).norm() / b.norm().max(floor)
}
