//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Everything is built around a [`Tape`]: forward primitives execute eagerly,
//! record themselves, and a single backward replay produces gradients with
//! respect to any leaf (model parameters and/or the raw pixel input). The
//! element type is generic so the same graph code runs in 32-bit for training
//! and attacks and in 64-bit for gradient-check tests.

pub(crate) mod kernels;
mod model;
mod tape;

pub use model::{
    backward_params, eval_scalar, finite_difference_oracle, forward_scalar_loss, input_gradient,
    DifferentiableModel, LossBackward, LossGraph, LossKind, ScalarSelector, TraceRefs,
};
pub use tape::{backward_pass_count, Gradients, Tape};

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Element type of tensors: `f32` for speed, `f64` for gradient checks.
pub trait Real:
    Float + FromPrimitive + Sum + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for converting literals into the active element type.
#[inline]
pub fn cast<E: Real>(x: f64) -> E {
    E::from(x).expect("literal conversion")
}

/// Identifies a node (tensor value) on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Dense n-dimensional array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Real> {
    shape: Vec<usize>,
    data: Vec<E>,
    pub requires_grad: bool,
    grad: Option<Vec<E>>,
}

impl<E: Real> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, GradError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(GradError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![E::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    /// Attaches a gradient buffer; it must match the tensor's own shape.
    pub fn set_grad(&mut self, grad: Vec<E>) -> Result<(), GradError> {
        if grad.len() != self.data.len() {
            return Err(GradError::ShapeMismatch {
                op: "set_grad",
                detail: format!("grad has {} elements, tensor has {}", grad.len(), self.data.len()),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// True when data (and grad, if any) contain no NaN/Inf.
    pub fn is_finite(&self) -> bool {
        all_finite(&self.data) && self.grad.as_deref().map_or(true, |g| all_finite(g))
    }

    /// Converts element precision, e.g. an f32-trained model into f64 for
    /// finite-difference tests.
    pub fn convert<F: Real>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| cast::<F>(v.to_f64().unwrap())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|&v| cast::<F>(v.to_f64().unwrap())).collect()),
        }
    }
}

pub(crate) fn all_finite<E: Real>(data: &[E]) -> bool {
    data.iter().all(|v| v.is_finite())
}

/// Errors raised by tape construction and differentiation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GradError {
    ShapeMismatch { op: &'static str, detail: String },
    NonFinite { op: &'static str, pass: &'static str },
    InvalidArg { op: &'static str, detail: String },
}

impl fmt::Display for GradError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            GradError::NonFinite { op, pass } => {
                write!(f, "non-finite values produced by {op} during {pass} pass")
            }
            GradError::InvalidArg { op, detail } => write!(f, "invalid argument to {op}: {detail}"),
        }
    }
}

impl std::error::Error for GradError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_shape_data_mismatch() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, GradError::ShapeMismatch { .. }));
    }

    #[test]
    fn grad_slot_must_match_shape() {
        let mut t = Tensor::<f32>::zeros(vec![4]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn finiteness_check_sees_grad_buffer() {
        let mut t = Tensor::<f64>::zeros(vec![2]);
        assert!(t.is_finite());
        t.set_grad(vec![f64::NAN, 0.0]).unwrap();
        assert!(!t.is_finite());
    }
}
