//! Reverse-mode differentiation over a fixed set of primitives.
//!
//! A [`Tape`] records every primitive application in evaluation order, so a
//! single reverse sweep visits each node after all of its consumers.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, softmax_in_place, softmax_rows, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// A trainable tensor. Values are always stored in `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate<T: Scalar>(&mut self, g: &Tensor<T>) {
        debug_assert_eq!(self.grad.shape(), g.shape(), "{}", self.name);
        for (a, &b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b.as_f32();
        }
    }

    /// Replaces the value; the gradient buffer follows the new shape.
    pub fn replace(&mut self, value: Tensor) {
        self.grad = Tensor::zeros(value.shape());
        self.value = value;
    }
}

/// Ordered, indexable collection of parameters.
pub trait ParamSet {
    fn param_count(&self) -> usize;
    fn param(&self, index: usize) -> &Param;
    fn param_mut(&mut self, index: usize) -> &mut Param;
}

impl ParamSet for Vec<Param> {
    fn param_count(&self) -> usize {
        self.len()
    }
    fn param(&self, index: usize) -> &Param {
        &self[index]
    }
    fn param_mut(&mut self, index: usize) -> &mut Param {
        &mut self[index]
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Attention {
        qkv: Var,
        geom: AttentionGeometry<T>,
        probs: Vec<T>,
    },
    MaskedMeanPool {
        x: Var,
        seq_len: usize,
        lengths: Vec<usize>,
    },
}

/// Layout of a batched multi-head attention evaluation.
///
/// The input row block `b·seq_len .. (b+1)·seq_len` holds example `b`, of
/// which only the first `lengths[b]` positions are real tokens; keys beyond
/// that are masked out.
#[derive(Clone, Debug)]
pub struct AttentionGeometry<T> {
    pub seq_len: usize,
    pub lengths: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub scale: T,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// The computation record: nodes in topological (creation) order.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Result of a reverse sweep: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err<T: Scalar>(op: &'static str, parts: &[&Tensor<T>]) -> Error {
    Error::ShapeMismatch {
        op,
        shapes: parts
            .iter()
            .map(|t| format!("{:?}", t.shape()))
            .collect::<Vec<_>>()
            .join(" vs "),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for parameter `index` of the caller's [`ParamSet`].
    pub fn param(&mut self, index: usize, value: &Tensor) -> Var {
        self.push(value.cast(), Op::Param(index))
    }

    /// `(param index, var)` for every parameter leaf, in tape order.
    pub fn param_leaves(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(p) => Some((p, Var(i))),
            _ => None,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(shape_err("transpose", &[x]));
        }
        let out = x.transpose();
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", &[x, y]));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.len() != x.cols() || x.shape().len() != 2 {
            return Err(shape_err("add_row", &[x, r]));
        }
        let mut out = x.clone();
        let c = out.cols();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(r.data()) {
                *o = *o + b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("mul", &[x, y]));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if g.len() != c || b.len() != c || xv.shape().len() != 2 {
            return Err(shape_err("layer_norm", &[xv, g, b]));
        }
        let n = T::lit(c as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g.data()[j] + b.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "embedding",
                    index: id,
                    len: t.rows(),
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / T::lit(x.len() as f64));
        self.push(out, Op::Mean(a))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.rows() != labels.len() || l.shape().len() != 2 {
            return Err(shape_err("cross_entropy", &[l]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= l.cols()) {
            return Err(Error::IndexOutOfRange {
                what: "cross_entropy label",
                index: bad,
                len: l.cols(),
            });
        }
        let probs = softmax_rows(l);
        let mut total = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            total = total + (lse - row[y]);
        }
        let out = Tensor::scalar(total / T::lit(labels.len() as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Scaled dot-product attention for every head of every example.
    ///
    /// `qkv` is `(batch·seq_len) × (3·heads·head_dim)` laid out as `[Q | K | V]`,
    /// head `h` occupying columns `h·head_dim .. (h+1)·head_dim` of each
    /// segment. Output is the concatenation of head outputs,
    /// `(batch·seq_len) × (heads·head_dim)`.
    pub fn attention(&mut self, qkv: Var, geom: AttentionGeometry<T>) -> Result<Var> {
        let x = self.value(qkv);
        let (t, hd, k) = (geom.seq_len, geom.head_dim, geom.heads);
        let width = k * hd;
        if x.shape().len() != 2
            || x.cols() != 3 * width
            || x.rows() != geom.lengths.len() * t
            || geom.lengths.iter().any(|&l| l == 0 || l > t)
        {
            return Err(shape_err("attention", &[x]));
        }
        let cols = 3 * width;
        let data = x.data();
        let mut out = vec![T::zero(); x.rows() * width];
        let mut probs = vec![T::zero(); geom.lengths.len() * k * t * t];
        for (b, &len) in geom.lengths.iter().enumerate() {
            for h in 0..k {
                let (qo, ko, vo) = (h * hd, width + h * hd, 2 * width + h * hd);
                let pbase = (b * k + h) * t * t;
                for i in 0..t {
                    let qi = &data[(b * t + i) * cols + qo..][..hd];
                    let prow = &mut probs[pbase + i * t..pbase + i * t + len];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let kj = &data[(b * t + j) * cols + ko..][..hd];
                        let dot = qi.iter().zip(kj).fold(T::zero(), |a, (&u, &v)| a + u * v);
                        *p = dot * geom.scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(b * t + i) * width + h * hd..][..hd];
                    for (j, &p) in prow.iter().enumerate() {
                        let vj = &data[(b * t + j) * cols + vo..][..hd];
                        for (o, &v) in orow.iter_mut().zip(vj) {
                            *o = *o + p * v;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![x.rows(), width], out)?;
        Ok(self.push(out, Op::Attention { qkv, geom, probs }))
    }

    /// Mean over the first `lengths[b]` rows of each `seq_len` row block.
    pub fn masked_mean_pool(&mut self, x: Var, seq_len: usize, lengths: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != seq_len * lengths.len() || lengths.iter().any(|&l| l == 0 || l > seq_len) {
            return Err(shape_err("masked_mean_pool", &[xv]));
        }
        let c = xv.cols();
        let mut out = vec![T::zero(); lengths.len() * c];
        for (b, &len) in lengths.iter().enumerate() {
            let orow = &mut out[b * c..(b + 1) * c];
            for t in 0..len {
                for (o, &v) in orow.iter_mut().zip(xv.row(b * seq_len + t)) {
                    *o = *o + v;
                }
            }
            let inv = T::one() / T::lit(len as f64);
            orow.iter_mut().for_each(|o| *o = *o * inv);
        }
        let out = Tensor::new(vec![lengths.len(), c], out)?;
        Ok(self.push(
            out,
            Op::MaskedMeanPool {
                x,
                seq_len,
                lengths: lengths.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, d: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, matmul_nt(g, self.value(*b))?);
                acc(*b, matmul_tn(self.value(*a), g)?);
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                acc(*a, matmul(g, self.value(*b))?);
                acc(*b, matmul_tn(g, self.value(*a))?);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                let c = g.cols();
                let mut dr = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    for (d, &v) in dr.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                acc(*r, Tensor::new(self.value(*r).shape().to_vec(), dr)?);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let dx = g.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
                let dy = g.data().iter().zip(x.data()).map(|(&p, &q)| p * q).collect();
                acc(*a, Tensor::new(x.shape().to_vec(), dx)?);
                acc(*b, Tensor::new(y.shape().to_vec(), dy)?);
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    d.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                acc(*a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let c = gv.len();
                let n = T::lit(c as f64);
                let mut dx = Vec::with_capacity(g.len());
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                for (r, (gr, hr)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..c {
                        let dh = gr[j] * gv.data()[j];
                        mean_d = mean_d + dh;
                        mean_dh = mean_dh + dh * hr[j];
                        dgain[j] = dgain[j] + gr[j] * hr[j];
                        dbias[j] = dbias[j] + gr[j];
                    }
                    mean_d = mean_d / n;
                    mean_dh = mean_dh / n;
                    for j in 0..c {
                        let dh = gr[j] * gv.data()[j];
                        dx.push(inv_std[r] * (dh - mean_d - hr[j] * mean_dh));
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
                acc(*gain, Tensor::new(gv.shape().to_vec(), dgain)?);
                acc(*bias, Tensor::new(self.value(*bias).shape().to_vec(), dbias)?);
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let mut d = Tensor::zeros(t.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                acc(*table, d);
            }
            Op::Sum(a) => acc(*a, Tensor::filled(self.value(*a).shape(), g.item())),
            Op::Mean(a) => {
                let x = self.value(*a);
                let v = g.item() / T::lit(x.len() as f64);
                acc(*a, Tensor::filled(x.shape(), v));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.item() / T::lit(labels.len() as f64);
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[y] = row[y] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                acc(*logits, d);
            }
            Op::Attention { qkv, geom, probs } => {
                acc(*qkv, self.attention_backward(*qkv, geom, probs, g)?);
            }
            Op::MaskedMeanPool { x, seq_len, lengths } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                for (b, &len) in lengths.iter().enumerate() {
                    let inv = T::one() / T::lit(len as f64);
                    for t in 0..len {
                        for (o, &v) in d.row_mut(b * seq_len + t).iter_mut().zip(g.row(b)) {
                            *o = v * inv;
                        }
                    }
                }
                debug_assert_eq!(d.cols(), c);
                acc(*x, d);
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        qkv: Var,
        geom: &AttentionGeometry<T>,
        probs: &[T],
        g: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let x = self.value(qkv);
        let data = x.data();
        let (t, hd, k) = (geom.seq_len, geom.head_dim, geom.heads);
        let width = k * hd;
        let cols = 3 * width;
        let mut d = vec![T::zero(); data.len()];
        let mut dp = vec![T::zero(); t];
        for (b, &len) in geom.lengths.iter().enumerate() {
            for h in 0..k {
                let (qo, ko, vo) = (h * hd, width + h * hd, 2 * width + h * hd);
                let pbase = (b * k + h) * t * t;
                for i in 0..t {
                    let p = &probs[pbase + i * t..pbase + i * t + len];
                    let go = &g.data()[(b * t + i) * width + h * hd..][..hd];
                    let mut weighted = T::zero();
                    for j in 0..len {
                        let vj = &data[(b * t + j) * cols + vo..][..hd];
                        dp[j] = go.iter().zip(vj).fold(T::zero(), |a, (&u, &v)| a + u * v);
                        weighted = weighted + p[j] * dp[j];
                        let dv = &mut d[(b * t + j) * cols + vo..][..hd];
                        for (o, &u) in dv.iter_mut().zip(go) {
                            *o = *o + p[j] * u;
                        }
                    }
                    for j in 0..len {
                        let ds = p[j] * (dp[j] - weighted) * geom.scale;
                        if ds == T::zero() {
                            continue;
                        }
                        for e in 0..hd {
                            let kj = data[(b * t + j) * cols + ko + e];
                            let qi = data[(b * t + i) * cols + qo + e];
                            d[(b * t + i) * cols + qo + e] = d[(b * t + i) * cols + qo + e] + ds * kj;
                            d[(b * t + j) * cols + ko + e] = d[(b * t + j) * cols + ko + e] + ds * qi;
                        }
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), d)
    }
}

/// Adds the gradient of every parameter leaf on `tape` into `params`.
pub fn accumulate_grads<T: Scalar, S: ParamSet + ?Sized>(tape: &Tape<T>, grads: &Gradients<T>, params: &mut S) {
    for (index, var) in tape.param_leaves() {
        if let Some(g) = grads.get(var) {
            params.param_mut(index).accumulate(g);
        }
    }
}

/// `value ← value − lr·grad` for every parameter, then zeroes the gradients.
pub fn sgd_step<S: ParamSet + ?Sized>(params: &mut S, lr: f32) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(crate::error::invalid("lr", format!("must be positive, got {lr}")));
    }
    for i in 0..params.param_count() {
        let p = params.param_mut(i);
        for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *w -= lr * g;
        }
        p.zero_grad();
    }
    Ok(())
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(param, element)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// A forward evaluation produced NaN or infinity.
    pub non_finite: bool,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error < tol
    }
}

/// Picks up to `per_param` coordinates of each parameter, skipping any for
/// which `exclude(param, element, value)` holds.
pub fn sample_coords<S: ParamSet + ?Sized, R: Rng>(
    params: &S,
    per_param: usize,
    rng: &mut R,
    exclude: impl Fn(usize, usize, f32) -> bool,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for p in 0..params.param_count() {
        let value = &params.param(p).value;
        let eligible: Vec<usize> = (0..value.len())
            .filter(|&e| !exclude(p, e, value.data()[e]))
            .collect();
        let n = per_param.min(eligible.len());
        out.extend(sample(rng, eligible.len(), n).into_iter().map(|i| (p, eligible[i])));
    }
    out
}

/// Compares each parameter's `grad` against central differences of `loss`.
///
/// The error at a coordinate is `|analytic − fd| / max(1, |fd|)`. The
/// perturbation actually applied is measured after rounding to `f32`, so the
/// difference quotient uses the exact step.
pub fn finite_diff_check<S, F>(params: &mut S, coords: &[(usize, usize)], h: f32, mut loss: F) -> FdReport
where
    S: ParamSet + ?Sized,
    F: FnMut(&S) -> f64,
{
    assert!(h > 0.0 && h <= 0.1, "h must lie in (0, 0.1]");
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        non_finite: false,
    };
    for &(p, e) in coords {
        let original = params.param(p).value.data()[e];
        let plus = original + h;
        let minus = original - h;
        params.param_mut(p).value.data_mut()[e] = plus;
        let lp = loss(params);
        params.param_mut(p).value.data_mut()[e] = minus;
        let lm = loss(params);
        params.param_mut(p).value.data_mut()[e] = original;
        if !lp.is_finite() || !lm.is_finite() {
            report.non_finite = true;
            report.max_rel_error = f64::INFINITY;
            report.worst = Some((p, e));
            continue;
        }
        let fd = (lp - lm) / (plus as f64 - minus as f64);
        let analytic = params.param(p).grad.data()[e] as f64;
        let err = (analytic - fd).abs() / fd.abs().max(1.0);
        report.checked += 1;
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst = Some((p, e));
        }
    }
    report
}
