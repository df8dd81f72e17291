//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! Everything in the model runs on [`Tensor`] values threaded through a
//! [`Tape`], which records each primitive as it executes and replays the
//! chain rule backwards on demand. Double precision throughout: the models
//! here are tiny and gradient-check fidelity matters more than speed.

mod gradcheck;
mod tape;

pub use gradcheck::{central_difference_rel_err, grad_check, GradFn};
pub use tape::{NodeId, Tape};

use crate::error::{KbError, Result};

/// A dense row-major f64 tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(KbError::Shape(format!("zero dimension in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(KbError::Shape(format!(
                "shape {shape:?} wants {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None }
    }

    /// Fills with N(0, std) draws from `rng`.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut crate::rng::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.next_normal() * std).collect();
        Tensor { shape, data, grad: None }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![v; numel], grad: None }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
