//! Dense row-major tensors and the reverse-mode autodiff graph.
//!
//! Values are stored as `f64`; the [`DType`] tag records the numeric precision
//! the tensor is meant to carry. `F32` tensors hold values rounded through
//! `f32` (so storing them in a 4-byte container is lossless) and are rejected
//! by the finite-difference gradient checker, which needs full `f64` precision.
//!
//! Complex data is carried as a trailing axis of size 2 (re, im); helpers for
//! that convention live in [`complex`].

mod graph;
mod gradcheck;

pub mod complex;

pub use gradcheck::grad_check;
pub use graph::{Graph, Var};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Dense N-dimensional tensor, row-major.
///
/// A tensor never aliases another tensor's storage: every operation that
/// participates in a graph allocates fresh storage for its result.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    pub requires_grad: bool,
    /// Populated for graph leaves after a backward pass, when requested.
    pub grad: Option<Box<Tensor>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![0.0; numel(shape)],
            shape: shape.to_vec(),
            dtype: DType::F64,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            data: vec![value; numel(shape)],
            shape: shape.to_vec(),
            dtype: DType::F64,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(&[1], vec![value]).unwrap()
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Standard-normal samples, deterministic for a given RNG state.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rounds values through f32 and tags the tensor as F32 precision.
    pub fn to_f32(mut self) -> Self {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
        self.dtype = DType::F32;
        self
    }

    pub fn to_f64(mut self) -> Self {
        self.dtype = DType::F64;
        self
    }

    pub(crate) fn with_dtype(mut self, dtype: DType) -> Self {
        if dtype == DType::F32 {
            self.to_f32()
        } else {
            self.dtype = dtype;
            self
        }
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let i = self.flat_index(idx);
        self.data[i] = value;
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let st = strides(&self.shape);
        idx.iter().zip(&st).map(|(i, s)| i * s).sum()
    }

    /// Copies the `i`-th slab along `axis`, dropping that axis.
    pub fn index_axis(&self, axis: usize, i: usize) -> Tensor {
        assert!(axis < self.rank() && i < self.shape[axis]);
        let outer: usize = self.shape[..axis].iter().product();
        let axis_len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * axis_len + i) * inner;
            out.extend_from_slice(&self.data[base..base + inner]);
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::from_vec(&shape, out).unwrap().with_dtype(self.dtype)
    }

    /// Stacks tensors of identical shape along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::arg("stack of zero tensors"));
        }
        let shape = parts[0].shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * parts[0].len());
        for p in parts {
            if p.shape() != shape.as_slice() {
                return Err(Error::shape("stack: mismatched part shapes"));
            }
            data.extend_from_slice(p.data());
        }
        let mut out_shape = vec![parts.len()];
        out_shape.extend_from_slice(&shape);
        Tensor::from_vec(&out_shape, data)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?}",
                self.shape, shape
            )));
        }
        let mut t = self.clone();
        t.shape = shape.to_vec();
        Ok(t)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::from_vec(&self.shape, data)
            .unwrap()
            .with_dtype(self.dtype)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.zip(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.zip(rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        self.zip(rhs, |a, b| a * b)
    }

    fn zip(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, rhs.shape, "elementwise shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(&self.shape, data)
            .unwrap()
            .with_dtype(self.dtype)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, rhs: &Tensor) -> f64 {
        assert_eq!(self.shape, rhs.shape);
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Relative L2 distance ‖a−b‖ / max(‖b‖, tiny).
    pub fn rel_l2_dist(&self, rhs: &Tensor) -> f64 {
        assert_eq!(self.shape, rhs.shape);
        let mut num = 0.0;
        let mut den = 0.0;
        for (&a, &b) in self.data.iter().zip(&rhs.data) {
            num += (a - b) * (a - b);
            den += b * b;
        }
        (num.sqrt()) / den.sqrt().max(1e-300)
    }
}
