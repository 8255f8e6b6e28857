//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op evaluates eagerly and, when gradients are enabled, records what
//! its backward rule needs. Core ops never broadcast: bias terms go through
//! [`Graph::broadcast_rows`] explicitly.

use std::collections::HashMap;

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a fused multi-head attention call.
///
/// Queries are `[batch·q_len, d]` and keys/values `[batch·k_len, d]`, with
/// each head owning a contiguous `d / heads` slice of the hidden axis.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `batch·k_len` flags, `true` where the key may be attended.
    pub key_mask: Option<Vec<bool>>,
    /// Query `i` may only attend keys `j ≤ i`.
    pub causal: bool,
}

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    BroadcastRows { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Reshape { a: Var },
    Transpose { a: Var },
    Sum { a: Var },
    Attention { q: Var, k: Var, v: Var, bias: Option<Var>, spec: AttentionSpec, probs: Vec<S> },
    GatherBias { table: Var, buckets: Vec<usize>, heads: usize },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<S>, count: usize },
    BceWithLogits { logits: Var, targets: Vec<Option<S>>, batch: usize },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// One forward/backward computation.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
    record: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    params: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    /// Add parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                store.accumulate_grad(id, g);
            }
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    if max == S::neg_infinity() {
        out.iter_mut().for_each(|o| *o = S::zero());
        return;
    }
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn gelu_consts<S: Scalar>() -> (S, S) {
    (
        S::lit((2.0 / std::f64::consts::PI).sqrt()),
        S::lit(0.044715),
    )
}

fn softplus<S: Scalar>(z: S) -> S {
    // log(1 + e^z), stable for large |z|
    if z > S::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

// Through one exp; libm's tanh is several times slower.
fn tanh<S: Scalar>(z: S) -> S {
    let two = S::lit(2.0);
    two * sigmoid(two * z) - S::one()
}

fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Graph<S> {
    /// A graph that records backward rules.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
        }
    }

    /// A graph for evaluation only: nothing is recorded for backward.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            requires_grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The graph node for a stored parameter. Repeated requests for one cell
    /// (including through an alias) return the same node, so tied uses
    /// accumulate into a single gradient.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            param: Some(id),
            requires_grad: self.record && p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// The parameter cell behind a node, if it is a parameter leaf.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        self.nodes[v.0].param
    }

    /// Parameter cells read by this graph.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.params.keys().copied().collect();
        ids.sort();
        ids
    }

    /// A stop-gradient copy of a parameter's current value.
    pub fn detached_param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    fn expect_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_2d("matmul", a)?;
        let (k2, n) = self.expect_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b: false }, &[a, b]))
    }

    /// `[m,k] · [n,k]ᵀ → [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_2d("matmul_nt", a)?;
        let (n, k2) = self.expect_2d("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b: true }, &[a, b]))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Repeat a vector (`[n]` or `[1,n]`) as `rows` identical rows.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let s = self.shape(a);
        let n = match s {
            [n] => *n,
            [1, n] => *n,
            _ => return Err(Error::shape("broadcast_rows", s, &[1, 0])),
        };
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let value = Tensor::new(&[rows, n], data)?;
        Ok(self.push(value, Op::BroadcastRows { a }, &[a]))
    }

    /// `x + bias` with `bias` repeated over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        let b = self.broadcast_rows(bias, rows)?;
        self.add(x, b)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = vec![S::zero(); t.numel()];
        for (src, dst) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(src, dst);
        }
        let value = Tensor::new(t.shape(), out).expect("same shape");
        self.push(value, Op::Softmax { a }, &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = vec![S::zero(); t.numel()];
        for (src, dst) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let max = src.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let lse = max + src.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v - lse;
            }
        }
        let value = Tensor::new(t.shape(), out).expect("same shape");
        self.push(value, Op::LogSoftmax { a }, &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gamma)));
        }
        let rows = t.rows();
        let eps = S::lit(eps);
        let n = S::from_usize(cols).expect("cols");
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![S::zero(); rows * cols];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + b[c];
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (k, c) = gelu_consts::<S>();
        let half = S::lit(0.5);
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| half * x * (S::one() + tanh(k * (x + c * x * x * x))))
            .collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Gelu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Sigmoid { a }, &[a])
    }

    /// Rows `ids` of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.expect_2d("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Select rows of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.expect_2d("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "row {bad} out of range for {rows} rows"
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(&[idx.len(), cols], data)?;
        Ok(self.push(value, Op::GatherRows { a, idx: idx.to_vec() }, &[a]))
    }

    /// Stack matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        };
        let (_, cols) = self.expect_2d("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.expect_2d("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.expect_2d("transpose", a)?;
        let src = self.value(a).data();
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], data)?;
        Ok(self.push(value, Op::Transpose { a }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, S::one() / S::from_usize(n).expect("count"))
    }

    /// Per-head bias `[heads, q_len, k_len]` read from a `[buckets, heads]`
    /// table at the given bucket of each `(q, k)` pair.
    pub fn gather_bias(
        &mut self,
        table: Var,
        buckets: &[usize],
        q_len: usize,
        k_len: usize,
    ) -> Result<Var> {
        let (nb, heads) = self.expect_2d("gather_bias", table)?;
        if buckets.len() != q_len * k_len {
            return Err(Error::shape("gather_bias", &[buckets.len()], &[q_len, k_len]));
        }
        if let Some(&bad) = buckets.iter().find(|&&b| b >= nb) {
            return Err(Error::InvalidArgument(format!("bucket {bad} ≥ {nb}")));
        }
        let src = self.value(table).data();
        let mut data = vec![S::zero(); heads * q_len * k_len];
        for h in 0..heads {
            for (p, &b) in buckets.iter().enumerate() {
                data[h * q_len * k_len + p] = src[b * heads + h];
            }
        }
        let value = Tensor::new(&[heads, q_len, k_len], data)?;
        Ok(self.push(
            value,
            Op::GatherBias { table, buckets: buckets.to_vec(), heads },
            &[table],
        ))
    }

    /// Scaled dot-product attention over pre-projected `q`, `k`, `v`.
    /// Masked keys receive exactly zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let AttentionSpec { batch, q_len, k_len, heads, .. } = spec;
        let (qr, d) = self.expect_2d("attention", q)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {d} is not divisible by {heads} heads"
            )));
        }
        if qr != batch * q_len {
            return Err(Error::shape("attention", self.shape(q), &[batch * q_len, d]));
        }
        for x in [k, v] {
            if self.shape(x) != [batch * k_len, d] {
                return Err(Error::shape("attention", self.shape(x), &[batch * k_len, d]));
            }
        }
        if let Some(b) = bias {
            if self.shape(b) != [heads, q_len, k_len] {
                return Err(Error::shape("attention bias", self.shape(b), &[heads, q_len, k_len]));
            }
        }
        if let Some(m) = &spec.key_mask {
            if m.len() != batch * k_len {
                return Err(Error::shape("attention mask", &[m.len()], &[batch * k_len]));
            }
        }
        if spec.causal && q_len > k_len {
            return Err(Error::shape("causal attention", &[q_len], &[k_len]));
        }
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).expect("dh").sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let bd = bias.map(|b| self.value(b).data());
        let mut probs = vec![S::zero(); batch * heads * q_len * k_len];
        let mut out = vec![S::zero(); batch * q_len * d];
        let mut scores = vec![S::zero(); k_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * d + off..][..dh];
                    for j in 0..k_len {
                        let allowed = spec.key_mask.as_ref().map_or(true, |m| m[b * k_len + j])
                            && (!spec.causal || j <= i);
                        scores[j] = if allowed {
                            let krow = &kd[(b * k_len + j) * d + off..][..dh];
                            let mut s = S::zero();
                            for t in 0..dh {
                                s = s + qrow[t] * krow[t];
                            }
                            let mut s = s * scale;
                            if let Some(bd) = bd {
                                s = s + bd[(h * q_len + i) * k_len + j];
                            }
                            s
                        } else {
                            S::neg_infinity()
                        };
                    }
                    let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    softmax_row(&scores, p);
                    let orow = &mut out[(b * q_len + i) * d + off..][..dh];
                    for j in 0..k_len {
                        let pj = p[j];
                        if pj == S::zero() {
                            continue;
                        }
                        let vrow = &vd[(b * k_len + j) * d + off..][..dh];
                        for t in 0..dh {
                            orow[t] = orow[t] + pj * vrow[t];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[batch * q_len, d], out)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        let probs = if self.record { probs } else { Vec::new() };
        Ok(self.push(value, Op::Attention { q, k, v, bias, spec, probs }, &inputs))
    }

    /// Mean token cross-entropy of `[n, classes]` logits; `None` targets are
    /// ignored. Fails when every target is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, classes) = self.expect_2d("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", &[n, classes], &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::InvalidArgument("loss over zero target tokens".into()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(Error::InvalidArgument(format!("target {bad} ≥ {classes} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![S::zero(); n * classes];
        let mut total = S::zero();
        for r in 0..n {
            let Some(t) = targets[r] else { continue };
            let row = &src[r * classes..(r + 1) * classes];
            softmax_row(row, &mut probs[r * classes..(r + 1) * classes]);
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            total = total + lse - row[t];
        }
        let loss = total / S::from_usize(count).expect("count");
        let probs = if self.record { probs } else { Vec::new() };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            &[logits],
        ))
    }

    /// Soft-target binary cross-entropy on `[batch, k]` logits, summed over
    /// the `k` candidates with a defined target and averaged over the batch.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[Option<S>]) -> Result<Var> {
        let (batch, k) = self.expect_2d("bce_with_logits", logits)?;
        if targets.len() != batch * k {
            return Err(Error::shape("bce_with_logits", &[batch, k], &[targets.len()]));
        }
        let z = self.value(logits).data();
        let mut total = S::zero();
        for (&zi, t) in z.iter().zip(targets) {
            if let Some(s) = *t {
                total = total + softplus(zi) - s * zi;
            }
        }
        let loss = total / S::from_usize(batch.max(1)).expect("batch");
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets: targets.to_vec(), batch },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        if self.value(output).numel() != 1 {
            return Err(Error::shape("backward", self.shape(output), &[1]));
        }
        if !self.value(output).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![S::one()]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }

        let params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        for &(_, v) in &params {
            if let Some(g) = &grads[v.0] {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("parameter gradient".into()));
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, idx: usize, gout: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                if self.needs(*a) {
                    // dA = dC · Bᵀ (or dC · B when B was transposed)
                    let g = grad_slot(grads, *a, m * k);
                    S::gemm(m, n, k, gout, false, bv.data(), !*trans_b, g, true);
                }
                if self.needs(*b) {
                    let g = grad_slot(grads, *b, k * n);
                    if *trans_b {
                        // B is [n,k]: dB = dCᵀ · A
                        S::gemm(n, m, k, gout, true, av.data(), false, g, true);
                    } else {
                        // dB = Aᵀ · dC
                        S::gemm(k, m, n, av.data(), true, gout, false, g, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(grad_slot(grads, v, gout.len()), gout);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(grad_slot(grads, *a, gout.len()), gout);
                }
                if self.needs(*b) {
                    let g = grad_slot(grads, *b, gout.len());
                    for (x, &y) in g.iter_mut().zip(gout) {
                        *x = *x - y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let g = grad_slot(grads, *a, gout.len());
                    for i in 0..gout.len() {
                        g[i] = g[i] + gout[i] * bv[i];
                    }
                }
                if self.needs(*b) {
                    let g = grad_slot(grads, *b, gout.len());
                    for i in 0..gout.len() {
                        g[i] = g[i] + gout[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let g = grad_slot(grads, *a, gout.len());
                for (x, &y) in g.iter_mut().zip(gout) {
                    *x = *x + y * *c;
                }
            }
            Op::BroadcastRows { a } => {
                let n = self.value(*a).numel();
                let g = grad_slot(grads, *a, n);
                for chunk in gout.chunks(n) {
                    add_into(g, chunk);
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let g = grad_slot(grads, *a, gout.len());
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..cols {
                        g[r * cols + c] = g[r * cols + c] + yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let g = grad_slot(grads, *a, gout.len());
                for r in 0..y.len() / cols {
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let total: S = gr.iter().copied().sum();
                    for c in 0..cols {
                        let p = y[r * cols + c].exp();
                        g[r * cols + c] = g[r * cols + c] + gr[c] - p * total;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = node.value.cols();
                let rows = rstd.len();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let g = grad_slot(grads, *gamma, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] = g[c] + gout[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.needs(*beta) {
                    let g = grad_slot(grads, *beta, cols);
                    for r in 0..rows {
                        add_into(g, &gout[r * cols..(r + 1) * cols]);
                    }
                }
                if self.needs(*x) {
                    let n = S::from_usize(cols).expect("cols");
                    let g = grad_slot(grads, *x, rows * cols);
                    for r in 0..rows {
                        let mut sum_d = S::zero();
                        let mut sum_dx = S::zero();
                        for c in 0..cols {
                            let dxh = gout[r * cols + c] * gam[c];
                            sum_d = sum_d + dxh;
                            sum_dx = sum_dx + dxh * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            let dxh = gout[r * cols + c] * gam[c];
                            let v = rstd[r] / n * (n * dxh - sum_d - xhat[r * cols + c] * sum_dx);
                            g[r * cols + c] = g[r * cols + c] + v;
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let (k, c) = gelu_consts::<S>();
                let half = S::lit(0.5);
                let three = S::lit(3.0);
                let xs = self.value(*a).data();
                let g = grad_slot(grads, *a, gout.len());
                for i in 0..xs.len() {
                    let x = xs[i];
                    let t = tanh(k * (x + c * x * x * x));
                    let dt = (S::one() - t * t) * k * (S::one() + three * c * x * x);
                    let d = half * (S::one() + t) + half * x * dt;
                    g[i] = g[i] + gout[i] * d;
                }
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                let g = grad_slot(grads, *a, gout.len());
                for i in 0..y.len() {
                    g[i] = g[i] + gout[i] * y[i] * (S::one() - y[i]);
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                let n = self.value(*table).numel();
                let g = grad_slot(grads, *table, n);
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut g[i * d..(i + 1) * d], &gout[r * d..(r + 1) * d]);
                }
            }
            Op::GatherRows { a, idx } => {
                let cols = node.value.cols();
                let n = self.value(*a).numel();
                let g = grad_slot(grads, *a, n);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut g[i * cols..(i + 1) * cols], &gout[r * cols..(r + 1) * cols]);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs(p) {
                        add_into(grad_slot(grads, p, n), &gout[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Reshape { a } => {
                add_into(grad_slot(grads, *a, gout.len()), gout);
            }
            Op::Transpose { a } => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let g = grad_slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = g[i * c + j] + gout[j * r + i];
                    }
                }
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                let g = grad_slot(grads, *a, n);
                for x in g.iter_mut() {
                    *x = *x + gout[0];
                }
            }
            Op::GatherBias { table, buckets, heads } => {
                let n = self.value(*table).numel();
                let pairs = buckets.len();
                let g = grad_slot(grads, *table, n);
                for h in 0..*heads {
                    for (p, &b) in buckets.iter().enumerate() {
                        g[b * heads + h] = g[b * heads + h] + gout[h * pairs + p];
                    }
                }
            }
            Op::Attention { q, k, v, bias, spec, probs } => {
                self.attention_backward(*q, *k, *v, *bias, spec, probs, gout, grads);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let classes = self.value(*logits).cols();
                let n = self.value(*logits).numel();
                let scale = gout[0] / S::from_usize(*count).expect("count");
                let g = grad_slot(grads, *logits, n);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..classes {
                        let mut d = probs[r * classes + c];
                        if c == t {
                            d = d - S::one();
                        }
                        g[r * classes + c] = g[r * classes + c] + d * scale;
                    }
                }
            }
            Op::BceWithLogits { logits, targets, batch } => {
                let z = self.value(*logits).data();
                let scale = gout[0] / S::from_usize((*batch).max(1)).expect("batch");
                let g = grad_slot(grads, *logits, z.len());
                for i in 0..z.len() {
                    if let Some(s) = targets[i] {
                        g[i] = g[i] + (sigmoid(z[i]) - s) * scale;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        spec: &AttentionSpec,
        probs: &[S],
        gout: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let AttentionSpec { batch, q_len, k_len, heads, .. } = *spec;
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).expect("dh").sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut dq = vec![S::zero(); qd.len()];
        let mut dk = vec![S::zero(); kd.len()];
        let mut dv = vec![S::zero(); vd.len()];
        let mut dbias = bias.map(|_| vec![S::zero(); heads * q_len * k_len]);
        let mut dp = vec![S::zero(); k_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let go = &gout[(b * q_len + i) * d + off..][..dh];
                    let mut dot = S::zero();
                    for j in 0..k_len {
                        if p[j] == S::zero() {
                            dp[j] = S::zero();
                            continue;
                        }
                        let vrow = &vd[(b * k_len + j) * d + off..][..dh];
                        let mut s = S::zero();
                        for t in 0..dh {
                            s = s + go[t] * vrow[t];
                        }
                        dp[j] = s;
                        dot = dot + p[j] * s;
                        let dvrow = &mut dv[(b * k_len + j) * d + off..][..dh];
                        for t in 0..dh {
                            dvrow[t] = dvrow[t] + p[j] * go[t];
                        }
                    }
                    let qrow = &qd[(b * q_len + i) * d + off..][..dh];
                    for j in 0..k_len {
                        if p[j] == S::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot);
                        if let Some(db) = dbias.as_mut() {
                            db[(h * q_len + i) * k_len + j] = db[(h * q_len + i) * k_len + j] + ds;
                        }
                        let ds = ds * scale;
                        let krow = &kd[(b * k_len + j) * d + off..][..dh];
                        let dqrow = &mut dq[(b * q_len + i) * d + off..][..dh];
                        for t in 0..dh {
                            dqrow[t] = dqrow[t] + ds * krow[t];
                        }
                        let dkrow = &mut dk[(b * k_len + j) * d + off..][..dh];
                        for t in 0..dh {
                            dkrow[t] = dkrow[t] + ds * qrow[t];
                        }
                    }
                }
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                add_into(grad_slot(grads, var, g.len()), &g);
            }
        }
        if let (Some(bv), Some(db)) = (bias, dbias) {
            if self.needs(bv) {
                add_into(grad_slot(grads, bv, db.len()), &db);
            }
        }
    }
}

fn grad_slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}
