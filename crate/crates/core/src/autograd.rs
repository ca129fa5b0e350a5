//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the inputs
//! needed to replay the chain rule. Node ids are issued in creation order, so
//! the tape is topologically sorted by construction and `backward` is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, f64),
    ScalarScale { x: Var, s: Var },
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    MeanOf(Vec<Var>),
    Sum(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    MeanAxis { x: Var, axis: usize },
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    DepthwiseConv2d { x: Var, w: Var },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Identity forward whose backward scales the gradient; a negative
    /// control for gradient checking.
    SkewedIdentity { x: Var, factor: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Records a forward computation and replays it backwards.
///
/// A tape is confined to one thread; it is `Send` but not shared.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// How the smaller operand of an elementwise op repeats over the larger.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::ShapeMismatch(format!(
        "cannot broadcast {a:?} with {b:?}"
    )))
}

/// Sum a full-size gradient down to a trailing-suffix shape of `len` elements.
fn reduce_to(grad: &[f64], len: usize) -> Vec<f64> {
    if grad.len() == len {
        return grad.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in grad.chunks_exact(len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let offset: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// `out[rows, r] = a[rows, q] * b[q, r]`
fn gemm(a: &[f64], b: &[f64], rows: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * r];
    for i in 0..rows {
        let a_row = &a[i * q..(i + 1) * q];
        let o_row = &mut out[i * r..(i + 1) * r];
        for (k, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[rows, q] = g[rows, r] * b[q, r]^T`
fn gemm_bt(g: &[f64], b: &[f64], rows: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * q];
    for i in 0..rows {
        let g_row = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let b_row = &b[k * r..(k + 1) * r];
            out[i * q + k] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[q, r] = a[rows, q]^T * g[rows, r]`
fn gemm_at(a: &[f64], g: &[f64], rows: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; q * r];
    for i in 0..rows {
        let a_row = &a[i * q..(i + 1) * q];
        let g_row = &g[i * r..(i + 1) * r];
        for (k, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[k * r..(k + 1) * r];
            for (o, &gv) in o_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
    out
}

pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Filled leaf; `InvalidShape` on a zero extent.
    pub fn full(&mut self, shape: &[usize], value: f64, requires_grad: bool) -> Result<Var> {
        Ok(self.leaf(Tensor::full(shape, value)?, requires_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clear accumulated gradients on every node.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape())?;
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let (la, lb) = (da.len(), db.len());
        let data = (0..n).map(|i| f(da[i % la], db[i % lb])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, op, rg))
    }

    /// Elementwise sum; the smaller operand repeats over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiply by a fixed (non-learnable) number.
    pub fn mul_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|e| e * c).collect();
        let out = Tensor::from_vec(v.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    /// `s * x` for a single-element tensor `s`.
    pub fn scalar_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "scalar_scale needs a single-element scale, got {:?}",
                sv.shape()
            )));
        }
        let sv = sv.data()[0];
        let v = self.value(x);
        let data = v.data().iter().map(|e| sv * e).collect();
        let out = Tensor::from_vec(v.shape(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScalarScale { x, s }, rg))
    }

    /// `a[.., p, q] * b[q, r] -> [.., p, r]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul {sa:?} x {sb:?}")));
        }
        let q = sb[0];
        let r = sb[1];
        let rows = va.numel() / q;
        let data = gemm(va.data(), vb.data(), rows, q, r);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = r;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::MatMul(a, b), rg))
    }

    /// `a[B, p, q] * b[B, q, r] -> [B, p, r]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch(format!(
                "batch_matmul {sa:?} x {sb:?}"
            )));
        }
        let (batch, p, q, r) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = Vec::with_capacity(batch * p * r);
        for i in 0..batch {
            let ab = &va.data()[i * p * q..(i + 1) * p * q];
            let bb = &vb.data()[i * q * r..(i + 1) * q * r];
            data.extend(gemm(ab, bb, p, q, r));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_vec(&[batch, p, r], data)?,
            Op::BatchMatMul(a, b),
            rg,
        ))
    }

    /// Elementwise mean of identically shaped tensors.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyReduction)?;
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.value(first).numel()];
        for &x in xs {
            let v = self.value(x);
            if v.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "mean_of {:?} vs {:?}",
                    shape,
                    v.shape()
                )));
            }
            for (d, e) in data.iter_mut().zip(v.data()) {
                *d += e;
            }
        }
        let k = xs.len() as f64;
        for d in &mut data {
            *d /= k;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::MeanOf(xs.to_vec()), rg))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Copying reshape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Copying axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::ShapeMismatch(format!(
                "permutation {perm:?} for rank {rank}"
            )));
        }
        let (shape, data) = permute_data(v.data(), v.shape(), perm);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&shape, data)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swap the two trailing axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::ShapeMismatch("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(x, &perm)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "mean_axis {axis} on shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for d in &mut data {
            *d /= len as f64;
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::MeanAxis { x, axis },
            rg,
        ))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = *v.shape().last().unwrap();
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks_exact(c) {
            data.extend(softmax_row(row));
        }
        let out = Tensor::from_vec(v.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Exact GeLU, `x * Phi(x)` with the Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * normal_cdf(e)).collect();
        let out = Tensor::from_vec(v.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gelu(x), rg))
    }

    /// Normalize over the last axis, then apply `gamma * . + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let c = *v.shape().last().unwrap();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm over {c} channels with gamma {:?}, beta {:?}",
                vg.shape(),
                vb.shape()
            )));
        }
        let rows = v.numel() / c;
        let mut xhat = Vec::with_capacity(v.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, e) in row.iter().enumerate() {
                let h = (e - mean) * r;
                xhat.push(h);
                data.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let out = Tensor::from_vec(v.shape(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Per-channel 2-D convolution of `x[b, H, W, c]` with `w[c, k, k]`,
    /// stride 1 and zero padding that keeps the spatial extents.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 3 || sw[1] != sw[2] || sw[1] % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "depthwise_conv2d input {sx:?} kernel {sw:?} (need [b,H,W,c] and odd [c,k,k])"
            )));
        }
        if sx[3] != sw[0] {
            return Err(Error::ShapeMismatch(format!(
                "depthwise_conv2d: {} input channels, {} kernel channels",
                sx[3], sw[0]
            )));
        }
        let data = dwconv_forward(vx.data(), vw.data(), sx, sw[1]);
        let out = Tensor::from_vec(sx, data)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::DepthwiseConv2d { x, w }, rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits[b, k])`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidLabel { label, classes: k });
        }
        let mut probs = Vec::with_capacity(v.numel());
        let mut loss = 0.0;
        for (row, &label) in v.data().chunks_exact(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|e| (e - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[label];
            probs.extend(row.iter().map(|e| (e - lse).exp()));
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Identity in the forward pass with a backward pass scaled by `factor`.
    /// Exists only to give gradient checking a known-bad operation.
    pub fn skewed_identity(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).clone();
        let rg = self.rg(x);
        self.push(out, Op::SkewedIdentity { x, factor }, rg)
    }

    /// Accumulate d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(existing) => {
                    for (e, gi) in existing.data_mut().iter_mut().zip(&g) {
                        *e += gi;
                    }
                }
                None => node.grad = Some(Tensor::from_vec(node.value.shape(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let send = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| {
            if self.rg(v) {
                accumulate(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (la, lb) = (self.value(*a).numel(), self.value(*b).numel());
                send(grads, *a, reduce_to(g, la));
                send(grads, *b, reduce_to(g, lb));
            }
            Op::Sub(a, b) => {
                let (la, lb) = (self.value(*a).numel(), self.value(*b).numel());
                send(grads, *a, reduce_to(g, la));
                let neg: Vec<f64> = reduce_to(g, lb).into_iter().map(|e| -e).collect();
                send(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let (la, lb) = (da.len(), db.len());
                if self.rg(*a) {
                    let full: Vec<f64> =
                        g.iter().enumerate().map(|(i, gi)| gi * db[i % lb]).collect();
                    send(grads, *a, reduce_to(&full, la));
                }
                if self.rg(*b) {
                    let full: Vec<f64> =
                        g.iter().enumerate().map(|(i, gi)| gi * da[i % la]).collect();
                    send(grads, *b, reduce_to(&full, lb));
                }
            }
            Op::MulConst(x, c) => send(grads, *x, g.iter().map(|e| e * c).collect()),
            Op::ScalarScale { x, s } => {
                let sv = self.value(*s).data()[0];
                if self.rg(*x) {
                    send(grads, *x, g.iter().map(|e| e * sv).collect());
                }
                if self.rg(*s) {
                    let xs = self.value(*x).data();
                    let gs: f64 = g.iter().zip(xs).map(|(a, b)| a * b).sum();
                    send(grads, *s, vec![gs]);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (q, r) = (vb.shape()[0], vb.shape()[1]);
                let rows = va.numel() / q;
                if self.rg(*a) {
                    send(grads, *a, gemm_bt(g, vb.data(), rows, q, r));
                }
                if self.rg(*b) {
                    send(grads, *b, gemm_at(va.data(), g, rows, q, r));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, p, q) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let r = vb.shape()[2];
                if self.rg(*a) {
                    let mut ga = Vec::with_capacity(va.numel());
                    for i in 0..batch {
                        let gb = &g[i * p * r..(i + 1) * p * r];
                        let bb = &vb.data()[i * q * r..(i + 1) * q * r];
                        ga.extend(gemm_bt(gb, bb, p, q, r));
                    }
                    send(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gbm = Vec::with_capacity(vb.numel());
                    for i in 0..batch {
                        let gb = &g[i * p * r..(i + 1) * p * r];
                        let ab = &va.data()[i * p * q..(i + 1) * p * q];
                        gbm.extend(gemm_at(ab, gb, p, q, r));
                    }
                    send(grads, *b, gbm);
                }
            }
            Op::MeanOf(xs) => {
                let k = xs.len() as f64;
                for &x in xs {
                    send(grads, x, g.iter().map(|e| e / k).collect());
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                send(grads, *x, vec![g[0]; n]);
            }
            Op::Reshape(x) => send(grads, *x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, data) = permute_data(g, node.value.shape(), &inverse);
                send(grads, *x, data);
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.value(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut out = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            out[(o * len + l) * inner + i] = g[o * inner + i] / len as f64;
                        }
                    }
                }
                send(grads, *x, out);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(c).zip(g.chunks_exact(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                send(grads, *x, out);
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let out = xs
                    .iter()
                    .zip(g)
                    .map(|(&e, gi)| gi * (normal_cdf(e) + e * normal_pdf(e)))
                    .collect();
                send(grads, *x, out);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let mut gg = vec![0.0; c];
                    for (hr, gr) in xhat.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    send(grads, *gamma, gg);
                }
                if self.rg(*beta) {
                    send(grads, *beta, reduce_to(g, c));
                }
                if self.rg(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for ((hr, gr), r) in xhat.chunks_exact(c).zip(g.chunks_exact(c)).zip(rstd) {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        gx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(d, h)| r * (d - mean_dh - h * mean_dh_h)),
                        );
                    }
                    send(grads, *x, gx);
                }
            }
            Op::DepthwiseConv2d { x, w } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let k = vw.shape()[1];
                let (gx, gw) = dwconv_backward(vx.data(), vw.data(), g, vx.shape(), k);
                send(grads, *x, gx);
                send(grads, *w, gw);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let mut out: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    out[i * k + l] -= scale;
                }
                send(grads, *logits, out);
            }
            Op::SkewedIdentity { x, factor } => {
                send(grads, *x, g.iter().map(|e| e * factor).collect())
            }
        }
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn dwconv_forward(x: &[f64], w: &[f64], shape: &[usize], k: usize) -> Vec<f64> {
    let (b, h, wd, c) = (shape[0], shape[1], shape[2], shape[3]);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..wd {
                let o = ((bi * h + i) * wd + j) * c;
                for u in 0..k {
                    let ii = i as isize + u as isize - pad;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for v in 0..k {
                        let jj = j as isize + v as isize - pad;
                        if jj < 0 || jj >= wd as isize {
                            continue;
                        }
                        let src = ((bi * h + ii as usize) * wd + jj as usize) * c;
                        for ch in 0..c {
                            out[o + ch] += w[(ch * k + u) * k + v] * x[src + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

fn dwconv_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    shape: &[usize],
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (b, h, wd, c) = (shape[0], shape[1], shape[2], shape[3]);
    let pad = (k / 2) as isize;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..wd {
                let o = ((bi * h + i) * wd + j) * c;
                for u in 0..k {
                    let ii = i as isize + u as isize - pad;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for v in 0..k {
                        let jj = j as isize + v as isize - pad;
                        if jj < 0 || jj >= wd as isize {
                            continue;
                        }
                        let src = ((bi * h + ii as usize) * wd + jj as usize) * c;
                        for ch in 0..c {
                            let widx = (ch * k + u) * k + v;
                            gx[src + ch] += w[widx] * g[o + ch];
                            gw[widx] += x[src + ch] * g[o + ch];
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}
