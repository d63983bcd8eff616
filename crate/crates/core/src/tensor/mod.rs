//! Dense real tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain shape + row-major buffer. Differentiable
//! computations are recorded on a [`Tape`](graph::Tape) which hands out
//! lightweight [`Var`](graph::Var) handles; calling
//! [`Tape::backward`](graph::Tape::backward) on a scalar root returns a
//! gradient map over all recorded leaves.

pub mod gradcheck;
pub mod graph;

mod kernels;

pub use gradcheck::finite_difference_check;
pub use graph::{concat, GradMap, ScatterMap, Tape, Var};
pub(crate) use kernels::*;

use crate::rng::Rng;
use crate::Real;
use std::fmt;

/// Errors raised by tensor construction and tensor operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch { context: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    InvalidAxis { axis: usize, rank: usize },
    NotScalar { numel: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { context, lhs, rhs } => {
                write!(f, "shape mismatch in {context}: {lhs:?} vs {rhs:?}")
            }
            TensorError::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            TensorError::NotScalar { numel } => {
                write!(f, "expected scalar tensor, got {numel} elements")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense row-major real tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                context: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Real) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    /// Uniform random entries in [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: Real, hi: Real, rng: &mut Rng) -> Self {
        Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
    }

    /// Normal random entries with the given standard deviation.
    pub fn rand_normal(shape: &[usize], std: Real, rng: &mut Rng) -> Self {
        Tensor::from_fn(shape, |_| rng.normal_scaled(std))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> Result<Real, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar { numel: self.data.len() })
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<Real, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                context: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn item_requires_scalar() {
        assert_eq!(Tensor::scalar(4.0).item().unwrap(), 4.0);
        assert!(Tensor::zeros(&[2]).item().is_err());
    }
}
