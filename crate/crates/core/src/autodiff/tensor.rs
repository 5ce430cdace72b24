//! Dense f64 tensor with optional gradient buffer.
//!
//! Storage is row-major. Everything in this crate runs in 64-bit floats:
//! the gradient checks and the metric oracles need the headroom, and the
//! models are small enough that speed is not a concern.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Column vector `[n, 1]`.
    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor {
            shape: vec![n, 1],
            data: values,
            requires_grad: false,
            grad: None,
        }
    }

    /// Row-major matrix from a flat buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows / columns for 2-D tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor trainable and allocates a zeroed gradient buffer.
    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Overwrites the gradient buffer; only valid on trainable tensors.
    pub fn set_grad(&mut self, grad: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::Contract(
                "set_grad on a tensor without requires_grad".into(),
            ));
        }
        if grad.len() != self.data.len() {
            return Err(Error::dimension(
                "set_grad",
                format!("grad len {} vs data len {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad.to_vec());
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let t = Tensor::zeros(vec![3, 2]).with_requires_grad();
        assert_eq!(t.grad().unwrap().len(), 6);
    }

    #[test]
    fn set_grad_requires_trainable() {
        let mut t = Tensor::zeros(vec![2, 2]);
        assert!(t.set_grad(&[1.0; 4]).is_err());
        let mut t = t.with_requires_grad();
        assert!(t.set_grad(&[1.0; 4]).is_ok());
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }
}
