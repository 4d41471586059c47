//! The operation vocabulary shared by every autodiff mode.
//!
//! Network and loss code is written once against [`Value`] and instantiated
//! with [`Tensor`] (plain evaluation), [`super::Var`] (reverse mode on a
//! tape), or [`super::Dual`] (forward mode), so the mathematics cannot drift
//! between modes.

use super::tensor::Tensor;
use super::AdError;

/// A differentiable value. All methods are shape-checked and return errors
/// rather than panicking.
pub trait Value: Clone + Sized {
    fn shape(&self) -> Vec<usize>;

    /// Materialises the (primal) value as a plain tensor.
    fn to_tensor(&self) -> Tensor;

    /// Brings a plain tensor into this value's context as a constant
    /// (e.g. records a constant leaf when `self` lives on a tape).
    fn lift(&self, t: &Tensor) -> Result<Self, AdError>;

    /// Stop-gradient: same value, treated as a constant from here on.
    fn detach(&self) -> Result<Self, AdError>;

    fn add(&self, other: &Self) -> Result<Self, AdError>;
    fn sub(&self, other: &Self) -> Result<Self, AdError>;
    fn mul(&self, other: &Self) -> Result<Self, AdError>;
    fn div(&self, other: &Self) -> Result<Self, AdError>;
    fn scale(&self, k: f64) -> Result<Self, AdError>;
    fn add_scalar(&self, k: f64) -> Result<Self, AdError>;
    fn clamp_min(&self, lo: f64) -> Result<Self, AdError>;
    fn clamp(&self, lo: f64, hi: f64) -> Result<Self, AdError>;

    fn square(&self) -> Result<Self, AdError>;
    fn sqrt(&self) -> Result<Self, AdError>;
    fn exp(&self) -> Result<Self, AdError>;
    fn log(&self) -> Result<Self, AdError>;
    fn sin(&self) -> Result<Self, AdError>;
    fn cos(&self) -> Result<Self, AdError>;
    fn tanh(&self) -> Result<Self, AdError>;
    fn relu(&self) -> Result<Self, AdError>;
    /// Heaviside step of the value; derivative is treated as zero.
    fn step_pos(&self) -> Result<Self, AdError>;
    fn gelu(&self) -> Result<Self, AdError>;

    fn matmul(&self, other: &Self) -> Result<Self, AdError>;
    fn transpose(&self) -> Result<Self, AdError>;
    fn sum(&self) -> Result<Self, AdError>;
    fn mean(&self) -> Result<Self, AdError>;
    fn row_l2norm(&self) -> Result<Self, AdError>;
    fn row_dot(&self, other: &Self) -> Result<Self, AdError>;

    fn concat_cols(parts: &[&Self]) -> Result<Self, AdError>;
    fn slice_cols(&self, start: usize, end: usize) -> Result<Self, AdError>;
    fn broadcast_row(&self, rows: usize) -> Result<Self, AdError>;
    fn broadcast_col(&self, cols: usize) -> Result<Self, AdError>;
    fn reshape(&self, shape: Vec<usize>) -> Result<Self, AdError>;

    fn neg(&self) -> Result<Self, AdError> {
        self.scale(-1.0)
    }
}

impl Value for Tensor {
    fn shape(&self) -> Vec<usize> {
        Tensor::shape(self).to_vec()
    }

    fn to_tensor(&self) -> Tensor {
        self.clone()
    }

    fn lift(&self, t: &Tensor) -> Result<Self, AdError> {
        Ok(t.clone())
    }

    fn detach(&self) -> Result<Self, AdError> {
        Ok(self.clone())
    }

    fn add(&self, other: &Self) -> Result<Self, AdError> {
        Tensor::add(self, other)
    }

    fn sub(&self, other: &Self) -> Result<Self, AdError> {
        Tensor::sub(self, other)
    }

    fn mul(&self, other: &Self) -> Result<Self, AdError> {
        Tensor::mul(self, other)
    }

    fn div(&self, other: &Self) -> Result<Self, AdError> {
        Tensor::div(self, other)
    }

    fn scale(&self, k: f64) -> Result<Self, AdError> {
        Ok(Tensor::scale(self, k))
    }

    fn add_scalar(&self, k: f64) -> Result<Self, AdError> {
        Ok(Tensor::add_scalar(self, k))
    }

    fn clamp_min(&self, lo: f64) -> Result<Self, AdError> {
        Ok(Tensor::clamp_min(self, lo))
    }

    fn clamp(&self, lo: f64, hi: f64) -> Result<Self, AdError> {
        Tensor::clamp(self, lo, hi)
    }

    fn square(&self) -> Result<Self, AdError> {
        Ok(Tensor::square(self))
    }

    fn sqrt(&self) -> Result<Self, AdError> {
        Ok(Tensor::sqrt(self))
    }

    fn exp(&self) -> Result<Self, AdError> {
        Ok(Tensor::exp(self))
    }

    fn log(&self) -> Result<Self, AdError> {
        Ok(Tensor::log(self))
    }

    fn sin(&self) -> Result<Self, AdError> {
        Ok(Tensor::sin(self))
    }

    fn cos(&self) -> Result<Self, AdError> {
        Ok(Tensor::cos(self))
    }

    fn tanh(&self) -> Result<Self, AdError> {
        Ok(Tensor::tanh(self))
    }

    fn relu(&self) -> Result<Self, AdError> {
        Ok(Tensor::relu(self))
    }

    fn step_pos(&self) -> Result<Self, AdError> {
        Ok(Tensor::step_pos(self))
    }

    fn gelu(&self) -> Result<Self, AdError> {
        Ok(Tensor::gelu(self))
    }

    fn matmul(&self, other: &Self) -> Result<Self, AdError> {
        Tensor::matmul(self, other)
    }

    fn transpose(&self) -> Result<Self, AdError> {
        Tensor::transpose(self)
    }

    fn sum(&self) -> Result<Self, AdError> {
        Ok(Tensor::sum(self))
    }

    fn mean(&self) -> Result<Self, AdError> {
        Tensor::mean(self)
    }

    fn row_l2norm(&self) -> Result<Self, AdError> {
        Tensor::row_l2norm(self)
    }

    fn row_dot(&self, other: &Self) -> Result<Self, AdError> {
        Tensor::row_dot(self, other)
    }

    fn concat_cols(parts: &[&Self]) -> Result<Self, AdError> {
        Tensor::concat_cols(parts)
    }

    fn slice_cols(&self, start: usize, end: usize) -> Result<Self, AdError> {
        Tensor::slice_cols(self, start, end)
    }

    fn broadcast_row(&self, rows: usize) -> Result<Self, AdError> {
        Tensor::broadcast_row(self, rows)
    }

    fn broadcast_col(&self, cols: usize) -> Result<Self, AdError> {
        Tensor::broadcast_col(self, cols)
    }

    fn reshape(&self, shape: Vec<usize>) -> Result<Self, AdError> {
        Tensor::reshape(self, shape)
    }
}
