//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain shape + buffer pair, generic over the scalar type
//! ([`Real`], implemented for `f32` and `f64`). [`Graph`] records operations
//! symbolically; [`Graph::evaluate`] runs a forward pass against named input
//! bindings and the resulting [`Evaluation`] can produce gradients and
//! per-sample gradients.
//!
//! Every public operation rejects non-finite values instead of letting them
//! propagate, and reductions run in ascending index order so repeated runs
//! are bit-identical on one platform.

mod eval;
mod graph;

pub use eval::{numeric_gradient, numeric_gradient_scaled, Evaluation};
pub use graph::{Bindings, Graph, NodeId};

use crate::error::{contract, numeric, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Scalar element type: IEEE-754 binary32 or binary64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point scalar usable as tensor element.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Most negative finite value; stands in for -inf in attention masks.
    fn most_negative() -> Self;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn most_negative() -> Self {
        f32::MIN
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn most_negative() -> Self {
        f64::MIN
    }
}

/// Dense row-major array of [`Real`] values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking `product(shape) == data.len()` and that all
    /// values are finite.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(numeric(format!(
                "tensor with shape {:?} contains non-finite values",
                shape
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// No finiteness or length validation; used by internal kernels whose
    /// outputs are checked by the graph evaluator.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![T::zero(); n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![T::one(); n])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![v; n])
    }

    /// Rank-0 tensor.
    pub fn scalar(v: T) -> Self {
        Self::from_raw(vec![], vec![v])
    }

    /// Seeded Gaussian init with standard deviation `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        Self::from_raw(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(contract(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, idx: &[usize]) -> T {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for (i, &d) in idx.iter().zip(self.shape.iter()).rev() {
            debug_assert!(*i < d);
            off += i * stride;
            stride *= d;
        }
        self.data[off]
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn from_f64_slice(shape: &[usize], vals: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), vals.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Precision conversion, preserving the `requires_grad` flag.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let mut t = Tensor::<U>::from_raw(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        );
        t.requires_grad = self.requires_grad;
        t
    }

    /// Max |a - b| over all elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_checked() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]);
        assert!(err.is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let err = Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]);
        assert!(matches!(err, Err(crate::error::Error::Numeric(_))));
        let err = Tensor::<f32>::new(vec![1], vec![f32::INFINITY]);
        assert!(err.is_err());
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::<f64>::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn randn_deterministic_per_seed() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let mut r2 = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let a = Tensor::<f32>::randn(&[4, 4], 0.02, &mut r1);
        let b = Tensor::<f32>::randn(&[4, 4], 0.02, &mut r2);
        assert_eq!(a, b);
    }
}
