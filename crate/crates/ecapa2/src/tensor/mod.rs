//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value type: a row-major flat buffer plus shape.
//! [`Graph`] records operations on a tape; [`Graph::backward`] replays the
//! tape in reverse and accumulates gradients into every `requires_grad` leaf.
//!
//! The op set is exactly what the embedding network and its losses need; all
//! ops reject NaN/Inf outputs with a checked error instead of propagating
//! them silently.

mod graph;
mod kernels;

pub use graph::{BnStats, Graph, Var};
pub use kernels::{
    conv_out_len, Conv1dGeom, Conv2dGeom,
};

use crate::error::{shape_err, Error, Result};
use crate::rng::SeedRng;

/// Dense multi-dimensional array; row-major, last index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, checking that the buffer matches the shape and holds
    /// only finite values.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(shape_err(format!(
                "buffer of {} values does not fill shape {:?} ({} cells)",
                data.len(),
                shape,
                numel
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor construction ({bad})")));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { shape: vec![n], data, requires_grad: false, grad: None }
    }

    /// N(0, std^2) initialized tensor.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SeedRng) -> Self {
        let mut t = Tensor::zeros(shape);
        crate::rng::fill_normal(&mut t.data, std, rng);
        t
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Reset any accumulated gradient to zero.
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Accumulate a gradient buffer of matching length.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match self.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(context.to_string()));
        }
        Ok(())
    }
}
