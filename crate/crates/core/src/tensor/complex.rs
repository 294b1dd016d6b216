//! Helpers for the trailing-axis complex convention.
//!
//! A complex tensor has shape `[..., 2]`; element pairs are (re, im) and are
//! laid out interleaved in memory, which matches `rustfft`'s `Complex<f64>`.

use super::Tensor;
use crate::error::{Error, Result};

pub fn check_complex(t: &Tensor) -> Result<()> {
    if t.rank() < 1 || *t.shape().last().unwrap() != 2 {
        return Err(Error::shape(format!(
            "expected trailing complex axis of size 2, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Elementwise complex multiply; shapes must match.
pub fn cmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "cmul shape mismatch");
    let mut out = Tensor::zeros(a.shape());
    let (av, bv, ov) = (a.data(), b.data(), out.data_mut());
    for i in (0..av.len()).step_by(2) {
        ov[i] = av[i] * bv[i] - av[i + 1] * bv[i + 1];
        ov[i + 1] = av[i] * bv[i + 1] + av[i + 1] * bv[i];
    }
    out
}

/// Multiply `a` (any leading shape ending in `b`'s shape) by `b`, complex.
/// Used to apply a per-pixel map to a stack of coil/frame images.
pub fn cmul_broadcast(a: &Tensor, b: &Tensor) -> Tensor {
    let bl = b.len();
    assert!(
        a.len() % bl == 0 && a.shape().ends_with(b.shape()),
        "cmul_broadcast: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = Tensor::zeros(a.shape());
    let (av, bv, ov) = (a.data(), b.data(), out.data_mut());
    for i in (0..av.len()).step_by(2) {
        let j = i % bl;
        ov[i] = av[i] * bv[j] - av[i + 1] * bv[j + 1];
        ov[i + 1] = av[i] * bv[j + 1] + av[i + 1] * bv[j];
    }
    out
}

pub fn conj(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    let ov = out.data_mut();
    for i in (1..ov.len()).step_by(2) {
        ov[i] = -ov[i];
    }
    out
}

/// Magnitude image; drops the trailing complex axis.
pub fn magnitude(a: &Tensor) -> Tensor {
    let n = a.len() / 2;
    let mut data = Vec::with_capacity(n);
    let av = a.data();
    for i in (0..av.len()).step_by(2) {
        data.push((av[i] * av[i] + av[i + 1] * av[i + 1]).sqrt());
    }
    let mut shape = a.shape().to_vec();
    shape.pop();
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::from_vec(&shape, data).unwrap()
}

/// Lifts a real tensor to complex with zero imaginary part.
pub fn from_real(a: &Tensor) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape.push(2);
    let mut data = Vec::with_capacity(a.len() * 2);
    for &v in a.data() {
        data.push(v);
        data.push(0.0);
    }
    Tensor::from_vec(&shape, data).unwrap()
}

/// Real part of ⟨a, b⟩ with the complex inner product; equals the real dot
/// product of the interleaved representations.
pub fn dot_re(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum()
}
