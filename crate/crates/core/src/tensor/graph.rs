//! Reverse-mode autodiff over a flat tape of primitive operations.
//!
//! Values are computed eagerly as the graph is built; `backward` walks the
//! tape once in reverse, accumulating gradients additively over fan-out.
//! Binary elementwise ops allow the right operand to broadcast when its shape
//! is a suffix of the left shape (or it is a scalar `[1]`); with row-major
//! storage the broadcast index is simply `i % rhs_len`, and the backward pass
//! sum-reduces over the leading axes the same way.

use super::{numel, strides, DType, Tensor};
use crate::error::{Error, Result};
use crate::fft;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(#[allow(dead_code)] f64),
    Relu,
    Abs,
    Exp,
    Sqrt,
    Matmul,
    Bmm,
    Reshape,
    Permute(Vec<usize>),
    Concat { axis: usize },
    SliceAxis { axis: usize, start: usize },
    SumAll,
    MeanAll,
    SumAxis { axis: usize },
    SoftmaxAxis { axis: usize },
    NormalizeLast { eps: f64 },
    Conv2d { pad: usize },
    AvgPool2,
    UpsampleNearest2,
    CMul,
    Conj,
    Fft2c,
    Ifft2c,
    PixelL2Norm { eps: f64 },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

/// Topologically ordered record of primitive operations.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn rhs_broadcasts(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs == [1] || lhs.ends_with(rhs)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a graph input; gradient participation follows
    /// the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(Op::Leaf, vec![], t, needs)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, vec![], t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, op: Op, a: Var, value: Tensor) -> Var {
        let needs = self.nodes[a.0].needs_grad;
        let dtype = self.nodes[a.0].value.dtype();
        self.push(op, vec![a.0], value.with_dtype(dtype), needs)
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, value: Tensor) -> Var {
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let dtype = match (self.nodes[a.0].value.dtype(), self.nodes[b.0].value.dtype()) {
            (DType::F32, DType::F32) => DType::F32,
            _ => DType::F64,
        };
        self.push(op, vec![a.0, b.0], value.with_dtype(dtype), needs)
    }

    // ---- elementwise -----------------------------------------------------

    fn ew(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(
            rhs_broadcasts(av.shape(), bv.shape()),
            "elementwise {:?}: rhs {:?} does not broadcast against lhs {:?}",
            op,
            bv.shape(),
            av.shape()
        );
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bl]))
            .collect();
        let value = Tensor::from_vec(av.shape(), data).unwrap();
        self.binary(op, a, b, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.ew(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.ew(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.ew(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.ew(Op::Div, a, b, |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| -x);
        self.unary(Op::Neg, a, value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        self.unary(Op::Scale(c), a, value)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        self.unary(Op::AddScalar(c), a, value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.unary(Op::Relu, a, value)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::abs);
        self.unary(Op::Abs, a, value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::exp);
        self.unary(Op::Exp, a, value)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::sqrt);
        self.unary(Op::Sqrt, a, value)
    }

    // ---- shape -----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0].value.reshaped(shape).expect("reshape");
        self.unary(Op::Reshape, a, value)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = permute_tensor(&self.nodes[a.0].value, axes);
        self.unary(Op::Permute(axes.to_vec()), a, value)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let mut axis_total = 0usize;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch at axis {d}");
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; numel(&out_shape)];
        let mut offset = 0usize;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let alen = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * alen * inner..(o + 1) * alen * inner];
                let dst_base = (o * axis_total + offset) * inner;
                data[dst_base..dst_base + alen * inner].copy_from_slice(src);
            }
            offset += alen;
        }
        let value = Tensor::from_vec(&out_shape, data).unwrap();
        let needs = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(
            Op::Concat { axis },
            parts.iter().map(|p| p.0).collect(),
            value,
            needs,
        )
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let shape = t.shape();
        assert!(axis < shape.len() && start + len <= shape[axis], "slice bounds");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let alen = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let value = Tensor::from_vec(&out_shape, data).unwrap();
        self.unary(Op::SliceAxis { axis, start }, a, value)
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        self.unary(Op::SumAll, a, value)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.unary(Op::MeanAll, a, value)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let shape = t.shape();
        assert!(axis < shape.len());
        let outer: usize = shape[..axis].iter().product();
        let alen = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..alen {
                let base = (o * alen + k) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    data[dst + i] += t.data()[base + i];
                }
            }
        }
        let value = Tensor::from_vec(&out_shape, data).unwrap();
        self.unary(Op::SumAxis { axis }, a, value)
    }

    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let shape = t.shape();
        assert!(axis < shape.len());
        let (outer, alen, inner) = axis_split(shape, axis);
        let mut data = vec![0.0; t.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * alen + k) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..alen {
                    m = m.max(t.data()[idx(k)]);
                }
                let mut s = 0.0;
                for k in 0..alen {
                    let e = (t.data()[idx(k)] - m).exp();
                    data[idx(k)] = e;
                    s += e;
                }
                for k in 0..alen {
                    data[idx(k)] /= s;
                }
            }
        }
        let value = Tensor::from_vec(shape, data).unwrap();
        self.unary(Op::SoftmaxAxis { axis }, a, value)
    }

    /// Zero-mean unit-variance normalization over the last axis
    /// (the affine scale/shift of a layer norm is applied by the caller).
    pub fn normalize_last(&mut self, a: Var, eps: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let c = *t.shape().last().expect("normalize_last on scalar");
        let rows = t.len() / c;
        let mut data = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..c {
                data[r * c + i] = (row[i] - mu) * inv;
            }
        }
        let value = Tensor::from_vec(t.shape(), data).unwrap();
        self.unary(Op::NormalizeLast { eps }, a, value)
    }

    // ---- linear algebra --------------------------------------------------

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(av.rank() == 2 && bv.rank() == 2, "matmul expects rank-2");
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::from_vec(&[m, n], out).unwrap();
        self.binary(Op::Matmul, a, b, value)
    }

    /// Batched matmul: `[B, m, k] @ [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(av.rank() == 3 && bv.rank() == 3, "bmm expects rank-3");
        let (ba, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bb, k2, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert!(ba == bb && k == k2, "bmm shape mismatch");
        let mut out = vec![0.0; ba * m * n];
        for s in 0..ba {
            matmul_acc(
                &av.data()[s * m * k..(s + 1) * m * k],
                &bv.data()[s * k * n..(s + 1) * k * n],
                &mut out[s * m * n..(s + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::from_vec(&[ba, m, n], out).unwrap();
        self.binary(Op::Bmm, a, b, value)
    }

    // ---- convolution and resampling ---------------------------------------

    /// Same-padded stride-1 2D convolution with optional bias.
    /// `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]` (odd k), `bias: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        assert_eq!(xv.rank(), 4, "conv2d input rank");
        assert_eq!(wv.rank(), 4, "conv2d weight rank");
        assert_eq!(xv.shape()[1], wv.shape()[1], "conv2d channel mismatch");
        let k = wv.shape()[2];
        assert!(k == wv.shape()[3] && k % 2 == 1, "conv2d kernel must be odd square");
        let bias_t = bias.map(|b| {
            let bt = &self.nodes[b.0].value;
            assert_eq!(bt.shape(), &[wv.shape()[0]], "conv2d bias shape");
            bt.clone()
        });
        let value = conv2d_forward(xv, wv, bias_t.as_ref());
        let mut inputs = vec![x.0, w.0];
        let mut needs = self.nodes[x.0].needs_grad || self.nodes[w.0].needs_grad;
        if let Some(b) = bias {
            inputs.push(b.0);
            needs |= self.nodes[b.0].needs_grad;
        }
        self.push(Op::Conv2d { pad: (k - 1) / 2 }, inputs, value, needs)
    }

    /// 2×2 average pooling; spatial extents must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.shape();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even extents");
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = 0.25
                        * (src[2 * i * w + 2 * j]
                            + src[2 * i * w + 2 * j + 1]
                            + src[(2 * i + 1) * w + 2 * j]
                            + src[(2 * i + 1) * w + 2 * j + 1]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], data).unwrap();
        self.unary(Op::AvgPool2, a, value)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.shape();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], data).unwrap();
        self.unary(Op::UpsampleNearest2, a, value)
    }

    // ---- complex (trailing re/im axis) -------------------------------------

    /// Complex multiply with suffix broadcast on the right operand.
    pub fn cmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(
            av.shape().last() == Some(&2) && bv.shape().last() == Some(&2),
            "cmul needs trailing complex axes"
        );
        assert!(
            av.shape().ends_with(bv.shape()),
            "cmul: rhs {:?} does not broadcast against {:?}",
            bv.shape(),
            av.shape()
        );
        let bl = bv.len();
        let mut data = vec![0.0; av.len()];
        let (ad, bd) = (av.data(), bv.data());
        for i in (0..ad.len()).step_by(2) {
            let j = i % bl;
            data[i] = ad[i] * bd[j] - ad[i + 1] * bd[j + 1];
            data[i + 1] = ad[i] * bd[j + 1] + ad[i + 1] * bd[j];
        }
        let value = Tensor::from_vec(av.shape(), data).unwrap();
        self.binary(Op::CMul, a, b, value)
    }

    pub fn conj(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        assert!(t.shape().last() == Some(&2), "conj needs trailing complex axis");
        let value = super::complex::conj(t);
        self.unary(Op::Conj, a, value)
    }

    /// Centered orthonormal 2D FFT over the trailing `[H, W, 2]` axes.
    pub fn fft2c(&mut self, a: Var) -> Var {
        let value = fft_apply(&self.nodes[a.0].value, true);
        self.unary(Op::Fft2c, a, value)
    }

    pub fn ifft2c(&mut self, a: Var) -> Var {
        let value = fft_apply(&self.nodes[a.0].value, false);
        self.unary(Op::Ifft2c, a, value)
    }

    /// Per-pixel L2 normalization over all leading axes and the complex axis:
    /// input `[..., H, W, 2]`, output `x / sqrt(Σ_leading,c x² + eps)` at each
    /// spatial position.
    pub fn pixel_l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.shape();
        assert!(s.len() >= 3 && *s.last().unwrap() == 2, "pixel_l2_normalize shape");
        let (h, w) = (s[s.len() - 3], s[s.len() - 2]);
        let lead = t.len() / (h * w * 2);
        let pix = h * w;
        let mut data = vec![0.0; t.len()];
        for p in 0..pix {
            let mut ss = 0.0;
            for l in 0..lead {
                let base = (l * pix + p) * 2;
                ss += t.data()[base] * t.data()[base] + t.data()[base + 1] * t.data()[base + 1];
            }
            let inv = 1.0 / (ss + eps).sqrt();
            for l in 0..lead {
                let base = (l * pix + p) * 2;
                data[base] = t.data()[base] * inv;
                data[base + 1] = t.data()[base + 1] * inv;
            }
        }
        let value = Tensor::from_vec(s, data).unwrap();
        self.unary(Op::PixelL2Norm { eps }, a, value)
    }

    // ---- backward ----------------------------------------------------------

    /// Runs the reverse pass from a scalar loss. Every leaf with
    /// `requires_grad` receives a gradient (zero if it does not participate).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph(
                "backward on a graph that was already consumed".into(),
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        self.grads = vec![None; n];
        for id in 0..n {
            let node = &self.nodes[id];
            if !matches!(node.op, Op::Leaf) || !node.value.requires_grad {
                continue;
            }
            let data = grads[id]
                .take()
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            self.grads[id] = Some(Tensor::from_vec(node.value.shape(), data).unwrap());
        }
        Ok(())
    }

    /// Gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Leaf tensor with its `grad` field populated (zero if non-participating).
    pub fn leaf_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        t.grad = self.grad(v).map(|g| Box::new(g.clone()));
        t
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        macro_rules! acc {
            ($input:expr) => {{
                let nid = ins[$input];
                grads[nid].get_or_insert_with(|| vec![0.0; self.nodes[nid].value.len()])
            }};
        }
        let in_val = |i: usize| self.nodes[ins[i]].value.data();
        let in_shape = |i: usize| self.nodes[ins[i]].value.shape();
        let in_needs = |i: usize| self.nodes[ins[i]].needs_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if in_needs(0) {
                    let ga = acc!(0);
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                }
                if in_needs(1) {
                    let bl = self.nodes[ins[1]].value.len();
                    let gb = acc!(1);
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % bl] += gv;
                    }
                }
            }
            Op::Sub => {
                if in_needs(0) {
                    let ga = acc!(0);
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                }
                if in_needs(1) {
                    let bl = self.nodes[ins[1]].value.len();
                    let gb = acc!(1);
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % bl] -= gv;
                    }
                }
            }
            Op::Mul => {
                let bl = self.nodes[ins[1]].value.len();
                if in_needs(0) {
                    let b = in_val(1);
                    let ga = acc!(0);
                    for (i, &gv) in g.iter().enumerate() {
                        ga[i] += gv * b[i % bl];
                    }
                }
                if in_needs(1) {
                    let a = in_val(0);
                    let gb = acc!(1);
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % bl] += gv * a[i];
                    }
                }
            }
            Op::Div => {
                let bl = self.nodes[ins[1]].value.len();
                if in_needs(0) {
                    let b = in_val(1);
                    let ga = acc!(0);
                    for (i, &gv) in g.iter().enumerate() {
                        ga[i] += gv / b[i % bl];
                    }
                }
                if in_needs(1) {
                    let a = in_val(0);
                    let b = in_val(1);
                    let gb = acc!(1);
                    for (i, &gv) in g.iter().enumerate() {
                        let bv = b[i % bl];
                        gb[i % bl] -= gv * a[i] / (bv * bv);
                    }
                }
            }
            Op::Neg => {
                let ga = acc!(0);
                for (gi, &gv) in ga.iter_mut().zip(g) {
                    *gi -= gv;
                }
            }
            Op::Scale(c) => {
                let c = *c;
                let ga = acc!(0);
                for (gi, &gv) in ga.iter_mut().zip(g) {
                    *gi += gv * c;
                }
            }
            Op::AddScalar(_) => {
                let ga = acc!(0);
                for (gi, &gv) in ga.iter_mut().zip(g) {
                    *gi += gv;
                }
            }
            Op::Relu => {
                let x = in_val(0);
                let ga = acc!(0);
                for (i, &gv) in g.iter().enumerate() {
                    if x[i] > 0.0 {
                        ga[i] += gv;
                    }
                }
            }
            Op::Abs => {
                let x = in_val(0);
                let ga = acc!(0);
                for (i, &gv) in g.iter().enumerate() {
                    ga[i] += gv * if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 };
                }
            }
            Op::Exp => {
                let y = node.value.data();
                let ga = acc!(0);
                for (i, &gv) in g.iter().enumerate() {
                    ga[i] += gv * y[i];
                }
            }
            Op::Sqrt => {
                let y = node.value.data();
                let ga = acc!(0);
                for (i, &gv) in g.iter().enumerate() {
                    ga[i] += gv * 0.5 / y[i];
                }
            }
            Op::Matmul => {
                let a = in_val(0);
                let b = in_val(1);
                let (m, k) = (in_shape(0)[0], in_shape(0)[1]);
                let n = in_shape(1)[1];
                if in_needs(0) {
                    let ga = acc!(0);
                    // ga += g @ b^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * b[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if in_needs(1) {
                    let gb = acc!(1);
                    // gb += a^T @ g
                    for i in 0..m {
                        for p in 0..k {
                            let aip = a[i * k + p];
                            if aip != 0.0 {
                                for j in 0..n {
                                    gb[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Bmm => {
                let a = in_val(0);
                let b = in_val(1);
                let (bs, m, k) = (in_shape(0)[0], in_shape(0)[1], in_shape(0)[2]);
                let n = in_shape(1)[2];
                if in_needs(0) {
                    let ga = acc!(0);
                    for s in 0..bs {
                        let (gb_, bb, gab) = (
                            &g[s * m * n..(s + 1) * m * n],
                            &b[s * k * n..(s + 1) * k * n],
                            &mut ga[s * m * k..(s + 1) * m * k],
                        );
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += gb_[i * n + j] * bb[p * n + j];
                                }
                                gab[i * k + p] += acc;
                            }
                        }
                    }
                }
                if in_needs(1) {
                    let gb = acc!(1);
                    for s in 0..bs {
                        let (gs, as_, gbs) = (
                            &g[s * m * n..(s + 1) * m * n],
                            &a[s * m * k..(s + 1) * m * k],
                            &mut gb[s * k * n..(s + 1) * k * n],
                        );
                        for i in 0..m {
                            for p in 0..k {
                                let aip = as_[i * k + p];
                                if aip != 0.0 {
                                    for j in 0..n {
                                        gbs[p * n + j] += aip * gs[i * n + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape => {
                let ga = acc!(0);
                for (gi, &gv) in ga.iter_mut().zip(g) {
                    *gi += gv;
                }
            }
            Op::Permute(axes) => {
                // out[j] = in[perm_map(j)]; grad flows back through the map.
                let in_sh = in_shape(0).to_vec();
                let out_sh = node.value.shape().to_vec();
                let in_st = strides(&in_sh);
                let out_st = strides(&out_sh);
                let ga = acc!(0);
                let rank = out_sh.len();
                let mut coord = vec![0usize; rank];
                for (j, &gv) in g.iter().enumerate() {
                    let mut rem = j;
                    for d in 0..rank {
                        coord[d] = rem / out_st[d];
                        rem %= out_st[d];
                    }
                    let mut src = 0usize;
                    for d in 0..rank {
                        src += coord[d] * in_st[axes[d]];
                    }
                    ga[src] += gv;
                }
            }
            Op::Concat { axis } => {
                let out_shape = node.value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0usize;
                for (pi, &nid) in ins.iter().enumerate() {
                    let alen = self.nodes[nid].value.shape()[*axis];
                    if self.nodes[nid].needs_grad {
                        let gp = grads[nid]
                            .get_or_insert_with(|| vec![0.0; self.nodes[nid].value.len()]);
                        for o in 0..outer {
                            let src_base = (o * total + offset) * inner;
                            let dst_base = o * alen * inner;
                            for i in 0..alen * inner {
                                gp[dst_base + i] += g[src_base + i];
                            }
                        }
                    }
                    let _ = pi;
                    offset += alen;
                }
            }
            Op::SliceAxis { axis, start } => {
                let in_sh = in_shape(0).to_vec();
                let outer: usize = in_sh[..*axis].iter().product();
                let inner: usize = in_sh[*axis + 1..].iter().product();
                let alen = in_sh[*axis];
                let len = node.value.shape()[*axis];
                let ga = acc!(0);
                for o in 0..outer {
                    let dst_base = (o * alen + start) * inner;
                    let src_base = o * len * inner;
                    for i in 0..len * inner {
                        ga[dst_base + i] += g[src_base + i];
                    }
                }
            }
            Op::SumAll => {
                let ga = acc!(0);
                for gi in ga.iter_mut() {
                    *gi += g[0];
                }
            }
            Op::MeanAll => {
                let n = self.nodes[ins[0]].value.len() as f64;
                let ga = acc!(0);
                for gi in ga.iter_mut() {
                    *gi += g[0] / n;
                }
            }
            Op::SumAxis { axis } => {
                let in_sh = in_shape(0).to_vec();
                let (outer, alen, inner) = axis_split(&in_sh, *axis);
                let ga = acc!(0);
                for o in 0..outer {
                    for k in 0..alen {
                        let base = (o * alen + k) * inner;
                        for i in 0..inner {
                            ga[base + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::SoftmaxAxis { axis } => {
                let y = node.value.data();
                let (outer, alen, inner) = axis_split(node.value.shape(), *axis);
                let ga = acc!(0);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * alen + k) * inner + i;
                        let mut dot = 0.0;
                        for k in 0..alen {
                            dot += g[idx(k)] * y[idx(k)];
                        }
                        for k in 0..alen {
                            ga[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
            Op::NormalizeLast { eps } => {
                let x = in_val(0);
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                let rows = x.len() / c;
                let ga = acc!(0);
                for r in 0..rows {
                    let xs = &x[r * c..(r + 1) * c];
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &g[r * c..(r + 1) * c];
                    let mu = xs.iter().sum::<f64>() / c as f64;
                    let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = gs.iter().sum::<f64>() / c as f64;
                    let gy: f64 =
                        gs.iter().zip(ys).map(|(&gv, &yv)| gv * yv).sum::<f64>() / c as f64;
                    for i in 0..c {
                        ga[r * c + i] += inv * (gs[i] - gmean - ys[i] * gy);
                    }
                }
            }
            Op::Conv2d { pad } => {
                let x = &self.nodes[ins[0]].value;
                let w = &self.nodes[ins[1]].value;
                let gt = Tensor::from_vec(node.value.shape(), g.to_vec()).unwrap();
                if in_needs(0) {
                    let gx = conv2d_input_grad(&gt, w, *pad);
                    let ga = acc!(0);
                    for (gi, &gv) in ga.iter_mut().zip(gx.data()) {
                        *gi += gv;
                    }
                }
                if in_needs(1) {
                    let gw = conv2d_weight_grad(x, &gt, w.shape()[2], *pad);
                    let gwa = acc!(1);
                    for (gi, &gv) in gwa.iter_mut().zip(gw.data()) {
                        *gi += gv;
                    }
                }
                if ins.len() > 2 && in_needs(2) {
                    let (n, co) = (node.value.shape()[0], node.value.shape()[1]);
                    let hw = node.value.shape()[2] * node.value.shape()[3];
                    let gb = acc!(2);
                    for ni in 0..n {
                        for c in 0..co {
                            let base = (ni * co + c) * hw;
                            let mut s = 0.0;
                            for i in 0..hw {
                                s += g[base + i];
                            }
                            gb[c] += s;
                        }
                    }
                }
            }
            Op::AvgPool2 => {
                let in_sh = in_shape(0).to_vec();
                let (h, w) = (in_sh[2], in_sh[3]);
                let (oh, ow) = (h / 2, w / 2);
                let planes = in_sh[0] * in_sh[1];
                let ga = acc!(0);
                for p in 0..planes {
                    let gsrc = &g[p * oh * ow..(p + 1) * oh * ow];
                    let gdst = &mut ga[p * h * w..(p + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = 0.25 * gsrc[i * ow + j];
                            gdst[2 * i * w + 2 * j] += gv;
                            gdst[2 * i * w + 2 * j + 1] += gv;
                            gdst[(2 * i + 1) * w + 2 * j] += gv;
                            gdst[(2 * i + 1) * w + 2 * j + 1] += gv;
                        }
                    }
                }
            }
            Op::UpsampleNearest2 => {
                let in_sh = in_shape(0).to_vec();
                let (h, w) = (in_sh[2], in_sh[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let planes = in_sh[0] * in_sh[1];
                let ga = acc!(0);
                for p in 0..planes {
                    let gsrc = &g[p * oh * ow..(p + 1) * oh * ow];
                    let gdst = &mut ga[p * h * w..(p + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            gdst[(i / 2) * w + j / 2] += gsrc[i * ow + j];
                        }
                    }
                }
            }
            Op::CMul => {
                let a = in_val(0);
                let b = in_val(1);
                let bl = b.len();
                if in_needs(0) {
                    let ga = acc!(0);
                    for i in (0..g.len()).step_by(2) {
                        let j = i % bl;
                        // vjp against conj(b)
                        ga[i] += g[i] * b[j] + g[i + 1] * b[j + 1];
                        ga[i + 1] += -g[i] * b[j + 1] + g[i + 1] * b[j];
                    }
                }
                if in_needs(1) {
                    let gb = acc!(1);
                    for i in (0..g.len()).step_by(2) {
                        let j = i % bl;
                        gb[j] += g[i] * a[i] + g[i + 1] * a[i + 1];
                        gb[j + 1] += -g[i] * a[i + 1] + g[i + 1] * a[i];
                    }
                }
            }
            Op::Conj => {
                let ga = acc!(0);
                for i in (0..g.len()).step_by(2) {
                    ga[i] += g[i];
                    ga[i + 1] -= g[i + 1];
                }
            }
            Op::Fft2c | Op::Ifft2c => {
                // The real-linear transpose of a unitary complex-linear map is
                // its inverse: vjp(fft2c) = ifft2c and vice versa.
                let forward = matches!(node.op, Op::Ifft2c);
                let s = node.value.shape();
                let (h, w) = (s[s.len() - 3], s[s.len() - 2]);
                let slabs = g.len() / (h * w * 2);
                let mut gg = g.to_vec();
                fft::transform_slabs(&mut gg, slabs, h, w, forward);
                let ga = acc!(0);
                for (gi, &gv) in ga.iter_mut().zip(&gg) {
                    *gi += gv;
                }
            }
            Op::PixelL2Norm { eps } => {
                let x = in_val(0);
                let s = node.value.shape();
                let (h, w) = (s[s.len() - 3], s[s.len() - 2]);
                let pix = h * w;
                let lead = x.len() / (pix * 2);
                let ga = acc!(0);
                for p in 0..pix {
                    let mut ss = 0.0;
                    let mut dot = 0.0;
                    for l in 0..lead {
                        let base = (l * pix + p) * 2;
                        ss += x[base] * x[base] + x[base + 1] * x[base + 1];
                        dot += g[base] * x[base] + g[base + 1] * x[base + 1];
                    }
                    let inv = 1.0 / (ss + eps).sqrt();
                    let inv3 = inv * inv * inv;
                    for l in 0..lead {
                        let base = (l * pix + p) * 2;
                        ga[base] += g[base] * inv - x[base] * inv3 * dot;
                        ga[base + 1] += g[base + 1] * inv - x[base + 1] * inv3 * dot;
                    }
                }
            }
        }
    }
}

fn fft_apply(t: &Tensor, forward: bool) -> Tensor {
    let s = t.shape();
    assert!(
        s.len() >= 3 && *s.last().unwrap() == 2,
        "fft ops need trailing [H, W, 2] axes, got {s:?}"
    );
    let (h, w) = (s[s.len() - 3], s[s.len() - 2]);
    let slabs = t.len() / (h * w * 2);
    let mut data = t.data().to_vec();
    fft::transform_slabs(&mut data, slabs, h, w, forward);
    Tensor::from_vec(s, data).unwrap()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_sh = t.shape();
    assert_eq!(axes.len(), in_sh.len(), "permute rank mismatch");
    let mut seen = vec![false; axes.len()];
    for &a in axes {
        assert!(a < axes.len() && !seen[a], "invalid permutation {axes:?}");
        seen[a] = true;
    }
    let out_sh: Vec<usize> = axes.iter().map(|&a| in_sh[a]).collect();
    let in_st = strides(in_sh);
    let out_st = strides(&out_sh);
    let mut data = vec![0.0; t.len()];
    let rank = axes.len();
    let mut coord = vec![0usize; rank];
    for (j, slot) in data.iter_mut().enumerate() {
        let mut rem = j;
        for d in 0..rank {
            coord[d] = rem / out_st[d];
            rem %= out_st[d];
        }
        let mut src = 0usize;
        for d in 0..rank {
            src += coord[d] * in_st[axes[d]];
        }
        *slot = t.data()[src];
    }
    Tensor::from_vec(&out_sh, data).unwrap()
}

fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                let src = &b[p * n..(p + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += aip * s;
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; n * co * h * wd];
    for ni in 0..n {
        for c in 0..co {
            let dst = &mut out[(ni * co + c) * h * wd..(ni * co + c + 1) * h * wd];
            if let Some(b) = bias {
                let bv = b.data()[c];
                for v in dst.iter_mut() {
                    *v = bv;
                }
            }
            for cin in 0..ci {
                let src = &x.data()[(ni * ci + cin) * h * wd..(ni * ci + cin + 1) * h * wd];
                for ky in 0..k {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..k {
                        let dx = kx as isize - pad as isize;
                        let wv = w.data()[((c * ci + cin) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        shifted_axpy(dst, src, wv, dy, dx, h, wd);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, h, wd], out).unwrap()
}

/// dst[y][x] += c * src[y+dy][x+dx] over valid coordinates.
fn shifted_axpy(dst: &mut [f64], src: &[f64], c: f64, dy: isize, dx: isize, h: usize, w: usize) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let drow = &mut dst[y * w + x0..y * w + x1];
        let srow = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        for (d, &s) in drow.iter_mut().zip(srow) {
            *d += c * s;
        }
    }
}

/// Gradient of the conv output w.r.t. the input: correlation with the
/// spatially flipped, channel-transposed kernel.
pub(crate) fn conv2d_input_grad(g: &Tensor, w: &Tensor, pad: usize) -> Tensor {
    let (n, co, h, wd) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let (ci, k) = (w.shape()[1], w.shape()[2]);
    let mut out = vec![0.0; n * ci * h * wd];
    for ni in 0..n {
        for cin in 0..ci {
            let dst = &mut out[(ni * ci + cin) * h * wd..(ni * ci + cin + 1) * h * wd];
            for c in 0..co {
                let src = &g.data()[(ni * co + c) * h * wd..(ni * co + c + 1) * h * wd];
                for ky in 0..k {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..k {
                        let dx = kx as isize - pad as isize;
                        let wv = w.data()[((c * ci + cin) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        // forward read src[y+dy][x+dx]; the adjoint writes with
                        // the opposite shift
                        shifted_axpy(dst, src, wv, -dy, -dx, h, wd);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, ci, h, wd], out).unwrap()
}

fn conv2d_weight_grad(x: &Tensor, g: &Tensor, k: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = g.shape()[1];
    let mut out = vec![0.0; co * ci * k * k];
    for ni in 0..n {
        for c in 0..co {
            let gp = &g.data()[(ni * co + c) * h * wd..(ni * co + c + 1) * h * wd];
            for cin in 0..ci {
                let xp = &x.data()[(ni * ci + cin) * h * wd..(ni * ci + cin + 1) * h * wd];
                for ky in 0..k {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..k {
                        let dx = kx as isize - pad as isize;
                        // dL/dw = Σ_{y,x} x[y+dy][x+dx] * g[y][x]
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (h as isize - dy.max(0)) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (wd as isize - dx.max(0)) as usize;
                        let mut s = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &gp[y * wd + x0..y * wd + x1];
                            let xrow = &xp[sy * wd + (x0 as isize + dx) as usize
                                ..sy * wd + (x1 as isize + dx) as usize];
                            for (&gv, &xv) in grow.iter().zip(xrow) {
                                s += gv * xv;
                            }
                        }
                        out[((c * ci + cin) * k + ky) * k + kx] += s;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[co, ci, k, k], out).unwrap()
}
