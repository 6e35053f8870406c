//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a flat row-major value; [`Tape`] records operations during
//! the forward pass and replays them in reverse to accumulate gradients.
//! [`grad_check`] verifies any scalar function of parameters against central
//! finite differences.

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Train/eval switch for stochastic ops (dropout).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense n-dimensional array of f64 in row-major order.
///
/// `node_id` is set when the tensor lives on a [`Tape`] and is unique within
/// that tape. `grad`, when present, has the same length as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    node_id: Option<NodeId>,
}

impl Tensor {
    /// Builds a tensor, validating that the shape matches the data length
    /// and every dimension is positive.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None, node_id: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn ones(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![1.0; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None, node_id: None }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Uniform random values in [lo, hi).
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut RngStream) -> Result<Self> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::new(shape, data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values; the shape cannot change through it.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node_id
    }

    pub(crate) fn set_node_id(&mut self, id: NodeId) {
        self.node_id = Some(id);
    }

    /// Element at a full index, row-major.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds for dim {i} of {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// True when every value is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_is_rejected() {
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Dimension(_))));
        assert!(matches!(Tensor::new(vec![2, 0], vec![]), Err(Error::Dimension(_))));
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.at(&[0, 0]), 1.0);
        assert_eq!(t.at(&[0, 2]), 3.0);
        assert_eq!(t.at(&[1, 0]), 4.0);
        assert_eq!(t.at(&[1, 2]), 6.0);
    }

    #[test]
    fn uniform_is_seeded_and_bounded() {
        let mut r1 = RngStream::seed_from(5);
        let mut r2 = RngStream::seed_from(5);
        let a = Tensor::uniform(vec![4, 4], -0.5, 0.5, &mut r1).unwrap();
        let b = Tensor::uniform(vec![4, 4], -0.5, 0.5, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| (-0.5..0.5).contains(v)));
    }
}
