//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles; calling
//! [`Tape::backward`] on a scalar accumulates gradients into the leaves.
//! [`gradient_check`] is the independent central-difference oracle used to
//! verify every loss in the crate.

mod gemm;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, objective};
pub use optim::{Adam, AdamConfig, Sgd};
pub use tape::{Tape, Var, STD_EPS};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// A model's trainable tensors in a fixed order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}
