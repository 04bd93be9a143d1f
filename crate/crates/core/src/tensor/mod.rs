//! Dense tensors and a reverse-mode tape.
//!
//! [`Tensor`] is plain row-major storage with explicit shape metadata and an
//! optional gradient buffer. All differentiable computation happens on a
//! [`Graph`], which records one forward pass and is dropped after
//! [`Graph::backward`]. Broadcasting is limited to tensor-scalar pairs.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod sequence;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, grad_check_many, numeric_gradient, GradCheck};
pub use graph::{Fault, Gradients, Graph, LeafGrad, OpKind, PoolMode, Var};
#[doc(hidden)]
pub use kernels::Activation;

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const PRECISION: Precision;

    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    #[doc(hidden)]
    fn dot(a: &[Self], b: &[Self]) -> Self;

    #[doc(hidden)]
    fn axpy(alpha: Self, x: &[Self], y: &mut [Self]);

    #[doc(hidden)]
    fn gemm_nt(x: &[Self], w: &[Self], m: usize, n: usize, k: usize, y: &mut [Self]);

    #[doc(hidden)]
    fn activate(act: kernels::Activation, x: &[Self], out: &mut [Self]);
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline(always)]
    fn dot(a: &[Self], b: &[Self]) -> Self {
        kernels::f64k::dot(a, b)
    }

    #[inline(always)]
    fn axpy(alpha: Self, x: &[Self], y: &mut [Self]) {
        kernels::f64k::axpy(alpha, x, y)
    }

    #[inline(always)]
    fn gemm_nt(x: &[Self], w: &[Self], m: usize, n: usize, k: usize, y: &mut [Self]) {
        kernels::f64k::gemm_nt(x, w, m, n, k, y)
    }

    #[inline(always)]
    fn activate(act: kernels::Activation, x: &[Self], out: &mut [Self]) {
        kernels::act::apply_f64(act, x, out)
    }

    #[inline(always)]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline(always)]
    fn dot(a: &[Self], b: &[Self]) -> Self {
        kernels::f32k::dot(a, b)
    }

    #[inline(always)]
    fn axpy(alpha: Self, x: &[Self], y: &mut [Self]) {
        kernels::f32k::axpy(alpha, x, y)
    }

    #[inline(always)]
    fn gemm_nt(x: &[Self], w: &[Self], m: usize, n: usize, k: usize, y: &mut [Self]) {
        kernels::f32k::gemm_nt(x, w, m, n, k, y)
    }

    #[inline(always)]
    fn activate(act: kernels::Activation, x: &[Self], out: &mut [Self]) {
        kernels::act::apply_f32(act, x, out)
    }

    #[inline(always)]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Row-major dense array with an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "shape {shape:?} must be a non-empty list of positive sizes"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::new(shape, vec![T::zero(); n]).expect("zeros: invalid shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("vector must be non-empty")
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    /// Marks the tensor as a differentiation target.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Resets the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Vec<T> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = self.data.len() / self.shape[0];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise conversion to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}


#[cfg(test)]
mod op_tests;
