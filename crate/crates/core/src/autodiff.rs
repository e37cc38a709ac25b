//! Reverse-mode differentiation over a Wengert list.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s together with
//! the forward value. [`Graph::backward`] walks the list in reverse and
//! accumulates vector-Jacobian products into every leaf created with
//! `requires_grad`. Only first-order derivatives are supported; the graph is
//! single-use per forward pass (call [`Graph::clear`] or build a new one).

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::quant::grid;
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, ConvDims};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Per-channel parameters of a fake-quantization node.
#[derive(Clone, Debug)]
pub struct FakeQuantSpec<T> {
    pub zero_points: Vec<T>,
    pub bits: u32,
    /// Channel axis of the quantized tensor; ignored when there is one channel.
    pub axis: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Gelu(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        dims: ConvDims,
    },
    BiasAdd {
        x: usize,
        bias: usize,
        inner: usize,
    },
    Reshape(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    FrobeniusNorm(usize),
    RowNorms(usize),
    FakeQuant {
        x: usize,
        scale: usize,
        offsets: Option<usize>,
        channel_of: Vec<usize>,
        zero_points: Vec<T>,
        codes: Vec<T>,
        qmax: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Some leaf below this node requires a gradient.
    tracked: bool,
}

/// Recording tape for one forward pass.
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are collected for it when the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let tracked = value.requires_grad();
        self.push(value, Op::Leaf, tracked)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_grad(true))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.check(v).expect("variable belongs to another graph");
        &self.nodes[v.index].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(
                "variable was not recorded on this tape (tape cleared or foreign graph)".into(),
            ));
        }
        Ok(v.index)
    }

    fn tracked(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].tracked)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: fn(usize) -> Op<T>) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(f);
        let tracked = self.tracked(&[ia]);
        Ok(self.push(value, op(ia), tracked))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked(&[ia, ib]);
        Ok(self.push(value, op(ia, ib), tracked))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::gemm(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            m,
            k,
            n,
            false,
            false,
        );
        let tracked = self.tracked(&[ia, ib]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(ia, ib), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| x * c);
        let tracked = self.tracked(&[ia]);
        Ok(self.push(value, Op::Scale(ia, c), tracked))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::gelu, Op::Gelu)
    }

    /// Stride-1 convolution with zero "same" padding.
    /// Input `[n, c, h, w]`, kernel `[o, c, kh, kw]` (odd kh, kw).
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (ii, ik) = (self.check(input)?, self.check(kernel)?);
        let (si, sk) = (self.nodes[ii].value.shape(), self.nodes[ik].value.shape());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("input {si:?}, kernel {sk:?}")));
        }
        let dims = ConvDims {
            n: si[0],
            c: si[1],
            h: si[2],
            w: si[3],
            o: sk[0],
            kh: sk[2],
            kw: sk[3],
        };
        let data = kernels::conv2d(self.nodes[ii].value.data(), self.nodes[ik].value.data(), dims);
        let value = Tensor::new(vec![dims.n, dims.o, dims.h, dims.w], data)?;
        let tracked = self.tracked(&[ii, ik]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: ii,
                kernel: ik,
                dims,
            },
            tracked,
        ))
    }

    /// Adds a per-channel bias along axis 1 of `[n, c, ...]`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (sx, sb) = (self.nodes[ix].value.shape(), self.nodes[ib].value.shape());
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("bias_add", format!("x {sx:?}, bias {sb:?}")));
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let b = self.nodes[ib].value.data();
        let data = self.nodes[ix]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % channels])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        let tracked = self.tracked(&[ix, ib]);
        Ok(self.push(value, Op::BiasAdd { x: ix, bias: ib, inner }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.reshape(shape)?.with_grad(false);
        let tracked = self.tracked(&[ix]);
        Ok(self.push(value, Op::Reshape(ix), tracked))
    }

    /// Per-sample softmax cross-entropy: logits `[n, classes]` -> `[n]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let t = &self.nodes[il].value;
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape("cross_entropy", format!("label {bad} >= {classes} classes")));
        }
        let mut probs = Vec::with_capacity(t.len());
        let mut losses = Vec::with_capacity(labels.len());
        for (r, &label) in labels.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            losses.push(lse - row[label]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let value = Tensor::vector(losses);
        let tracked = self.tracked(&[il]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let per_sample = self.cross_entropy(logits, labels)?;
        self.mean(per_sample)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s: T = self.nodes[ia].value.data().iter().copied().sum();
        let tracked = self.tracked(&[ia]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia), tracked))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let s: T = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        let tracked = self.tracked(&[ia]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(ia), tracked))
    }

    /// Sums everything but the leading axis: `[n, ...] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let sums = (0..t.shape()[0]).map(|r| t.row(r).iter().copied().sum()).collect();
        let tracked = self.tracked(&[ia]);
        Ok(self.push(Tensor::vector(sums), Op::SumRows(ia), tracked))
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let n = self.nodes[ia].value.data().iter().map(|&x| x * x).sum::<T>().sqrt();
        let tracked = self.tracked(&[ia]);
        Ok(self.push(Tensor::scalar(n), Op::FrobeniusNorm(ia), tracked))
    }

    /// Frobenius norm of every leading-axis slice: `[n, ...] -> [n]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let norms = (0..t.shape()[0])
            .map(|r| t.row(r).iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let tracked = self.tracked(&[ia]);
        Ok(self.push(Tensor::vector(norms), Op::RowNorms(ia), tracked))
    }

    /// Quantize-dequantize with straight-through gradients.
    ///
    /// `scale` holds one entry per channel (a single entry for per-tensor
    /// quantization). When `offsets` is given it must match `x` and shifts
    /// each element's rounding decision. Gradients: `x` and `offsets` receive
    /// the upstream gradient (times `s` for offsets) where the code was not
    /// clamped and zero elsewhere; `scale` receives the LSQ-style derivative.
    pub fn fake_quant(
        &mut self,
        x: Var,
        scale: Var,
        offsets: Option<Var>,
        spec: &FakeQuantSpec<T>,
    ) -> Result<Var> {
        let ix = self.check(x)?;
        let is = self.check(scale)?;
        let io = offsets.map(|o| self.check(o)).transpose()?;
        let xv = &self.nodes[ix].value;
        let sv = self.nodes[is].value.data();
        let channels = sv.len();
        if spec.zero_points.len() != channels {
            return Err(Error::shape(
                "fake_quant",
                format!("{channels} scales vs {} zero points", spec.zero_points.len()),
            ));
        }
        let channel_of = channel_index(xv.shape(), spec.axis, channels)
            .ok_or_else(|| Error::shape("fake_quant", format!("{channels} channels on axis {} of {:?}", spec.axis, xv.shape())))?;
        if let Some(io) = io {
            if self.nodes[io].value.shape() != xv.shape() {
                return Err(Error::shape(
                    "fake_quant",
                    format!("offsets {:?} vs x {:?}", self.nodes[io].value.shape(), xv.shape()),
                ));
            }
        }
        let qmax = grid::qmax::<T>(spec.bits);
        let off = io.map(|io| self.nodes[io].value.data());
        let mut codes = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (i, &v) in xv.data().iter().enumerate() {
            let c = channel_of[i];
            let (s, z0) = (sv[c], spec.zero_points[c]);
            let code = grid::code(v / s + z0, off.map(|o| o[i]));
            codes.push(code);
            out.push(s * (grid::clamp(code, qmax) - z0));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let mut deps = vec![ix, is];
        deps.extend(io);
        let tracked = self.tracked(&deps);
        Ok(self.push(
            value,
            Op::FakeQuant {
                x: ix,
                scale: is,
                offsets: io,
                channel_of,
                zero_points: spec.zero_points.clone(),
                codes,
                qmax,
            },
            tracked,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=il).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);

        for i in (0..=il).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                out.insert(i, Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads: out,
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |j: usize, f: &dyn Fn(usize) -> T| {
            if !nodes[j].tracked {
                return;
            }
            let n = nodes[j].value.len();
            let slot = grads[j].get_or_insert_with(|| vec![T::zero(); n]);
            for (k, s) in slot.iter_mut().enumerate() {
                *s += f(k);
            }
        };
        let val = |j: usize| nodes[j].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if nodes[*a].tracked {
                    let ga = kernels::gemm(g, val(*b), m, n, k, false, true);
                    acc(*a, &|p| ga[p]);
                }
                if nodes[*b].tracked {
                    let gb = kernels::gemm(val(*a), g, k, m, n, true, false);
                    acc(*b, &|p| gb[p]);
                }
            }
            Op::Add(a, b) => {
                acc(*a, &|k| g[k]);
                acc(*b, &|k| g[k]);
            }
            Op::Sub(a, b) => {
                acc(*a, &|k| g[k]);
                acc(*b, &|k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|k| g[k] * vb[k]);
                acc(*b, &|k| g[k] * va[k]);
            }
            Op::Scale(a, c) => acc(*a, &|k| g[k] * *c),
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &|k| if va[k] > T::zero() { g[k] } else { T::zero() });
            }
            Op::Gelu(a) => {
                let va = val(*a);
                acc(*a, &|k| g[k] * kernels::gelu_grad(va[k]));
            }
            Op::Conv2d {
                input,
                kernel,
                dims,
            } => {
                let (gi, gk) = kernels::conv2d_backward(val(*input), val(*kernel), g, *dims);
                acc(*input, &|k| gi[k]);
                acc(*kernel, &|k| gk[k]);
            }
            Op::BiasAdd { x, bias, inner } => {
                acc(*x, &|k| g[k]);
                if nodes[*bias].tracked {
                    let channels = nodes[*bias].value.len();
                    let mut gb = vec![T::zero(); channels];
                    for (k, &gk) in g.iter().enumerate() {
                        gb[(k / inner) % channels] += gk;
                    }
                    acc(*bias, &|k| gb[k]);
                }
            }
            Op::Reshape(a) => acc(*a, &|k| g[k]),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = nodes[*logits].value.shape()[1];
                acc(*logits, &|k| {
                    let (r, c) = (k / classes, k % classes);
                    let onehot = if labels[r] == c { T::one() } else { T::zero() };
                    g[r] * (probs[k] - onehot)
                });
            }
            Op::Sum(a) => acc(*a, &|_| g[0]),
            Op::Mean(a) => {
                let n = T::lit(nodes[*a].value.len() as f64);
                acc(*a, &|_| g[0] / n);
            }
            Op::SumRows(a) => {
                let stride = nodes[*a].value.row_len();
                acc(*a, &|k| g[k / stride]);
            }
            Op::FrobeniusNorm(a) => {
                let norm = nodes[i].value.data()[0];
                let va = val(*a);
                acc(*a, &|k| if norm > T::zero() { g[0] * va[k] / norm } else { T::zero() });
            }
            Op::RowNorms(a) => {
                let stride = nodes[*a].value.row_len();
                let norms = nodes[i].value.data();
                let va = val(*a);
                acc(*a, &|k| {
                    let nr = norms[k / stride];
                    if nr > T::zero() {
                        g[k / stride] * va[k] / nr
                    } else {
                        T::zero()
                    }
                });
            }
            Op::FakeQuant {
                x,
                scale,
                offsets,
                channel_of,
                zero_points,
                codes,
                qmax,
            } => {
                let in_range = |k: usize| codes[k] >= T::zero() && codes[k] <= *qmax;
                let sv = val(*scale);
                acc(*x, &|k| if in_range(k) { g[k] } else { T::zero() });
                if let Some(o) = offsets {
                    acc(*o, &|k| {
                        if in_range(k) {
                            g[k] * sv[channel_of[k]]
                        } else {
                            T::zero()
                        }
                    });
                }
                if nodes[*scale].tracked {
                    let xv = val(*x);
                    let mut gs = vec![T::zero(); sv.len()];
                    for k in 0..g.len() {
                        let c = channel_of[k];
                        let q = grid::clamp(codes[k], *qmax);
                        let d = if in_range(k) {
                            q - zero_points[c] - xv[k] / sv[c]
                        } else {
                            q - zero_points[c]
                        };
                        gs[c] += g[k] * d;
                    }
                    acc(*scale, &|c| gs[c]);
                }
            }
        }
    }
}

/// Channel id of every element of a tensor with `shape`, for `channels`
/// channels laid out along `axis`. A single channel maps everything to 0.
pub(crate) fn channel_index(shape: &[usize], axis: usize, channels: usize) -> Option<Vec<usize>> {
    let n: usize = shape.iter().product();
    if channels == 1 {
        return Some(vec![0; n]);
    }
    if axis >= shape.len() || shape[axis] != channels {
        return None;
    }
    let inner: usize = shape[axis + 1..].iter().product();
    Some((0..n).map(|i| (i / inner) % channels).collect())
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf of
/// the graph it was computed on. Leaves the loss does not depend on map to
/// zero tensors.
#[derive(Debug)]
pub struct Gradients<T> {
    graph: u64,
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(&v.index)
    }

    /// Like [`get`](Self::get) but reports a tape error for unknown vars.
    pub fn wrt(&self, v: Var) -> Result<&Tensor<T>> {
        self.get(v)
            .ok_or_else(|| Error::Tape("no gradient recorded for variable".into()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
