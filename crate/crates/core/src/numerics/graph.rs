//! Reverse-mode differentiation over an append-only tape.
//!
//! Each forward call records a node holding its output value and whatever
//! it needs for the backward pass. [`Graph::backward`] walks the tape in
//! reverse creation order.

use serde::{Deserialize, Serialize};

use super::kernels::{self, AttentionSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Aggregation used to turn a latent sequence into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(Error::Config(format!("unknown pooling kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        })
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: Box<AttentionSpec>,
        probs: Vec<f64>,
    },
    Pool {
        x: Var,
        mask: Vec<bool>,
        len: usize,
        kind: Pooling,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        gold: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Correlation {
        zs: Var,
        zt: Var,
        norm_s: Vec<f64>,
        norm_t: Vec<f64>,
        clamped_s: Vec<bool>,
        clamped_t: Vec<bool>,
    },
    BarlowTwins {
        c: Var,
        lambda: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape. Create one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Attention probabilities `[batch, heads, query_len, key_len]` recorded by
    /// an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttentionSpec, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    /// Matrix product. `a` may have any rank; its leading dimensions are
    /// flattened into rows. `b` must be a `k×n` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(m, k, n, av.data(), bv.data(), &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::raw(shape, out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(mismatch("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::raw(av.shape().to_vec(), data);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.len() != av.cols() {
            return Err(mismatch("add_bias", av, bv));
        }
        let c = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data()[i % c])
            .collect();
        let t = Tensor::raw(av.shape().to_vec(), data);
        Ok(self.push(t, Op::AddBias(a, bias), &[a, bias]))
    }

    /// Elementwise product of equal-length tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(mismatch("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::raw(av.shape().to_vec(), data);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::raw(av.shape().to_vec(), av.data().iter().map(|x| x * s).collect());
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::raw(av.shape().to_vec(), av.data().iter().map(|x| x.max(0.0)).collect());
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            kernels::softmax_row(row);
        }
        let t = Tensor::raw(av.shape().to_vec(), data);
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(mismatch("layer_norm", xv, self.value(gain)));
        }
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        for (src, dst) in xv.data().chunks(c).zip(xhat.chunks_mut(c)) {
            inv_std.push(kernels::standardize(src, eps, dst));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let data = xhat.iter().enumerate().map(|(i, v)| v * g[i % c] + b[i % c]).collect();
        let t = Tensor::raw(xv.shape().to_vec(), data);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Batch normalization with batch statistics only (population variance),
    /// no affine parameters.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() < 2 {
            return Err(Error::BatchTooSmall {
                op: "batch_norm",
                rows: xv.rows(),
            });
        }
        let (xhat, inv_std) = kernels::batch_standardize(xv.data(), xv.rows(), xv.cols(), eps);
        let t = Tensor::raw(xv.shape().to_vec(), xhat.clone());
        Ok(self.push(t, Op::BatchNorm { x, xhat, inv_std }, &[x]))
    }

    /// Gathers rows of a `[V×n]` table; output shape is `out_prefix ++ [n]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_prefix: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: tv.shape().to_vec(),
                rhs: vec![2],
            });
        }
        let (rows, n) = (tv.shape()[0], tv.shape()[1]);
        if out_prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: out_prefix.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index { index: id, size: rows });
            }
            data.extend_from_slice(tv.row(id));
        }
        let mut shape = out_prefix.to_vec();
        shape.push(n);
        let t = Tensor::raw(shape, data);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Multi-head scaled dot-product attention over flattened rows.
    /// `q` is `[batch·query_len × width]`, `k` and `v` are `[batch·key_len × width]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        if spec.heads == 0 || width % spec.heads != 0 {
            return Err(Error::Config(format!(
                "width {width} not divisible by {} heads",
                spec.heads
            )));
        }
        if qv.rows() != spec.batch * spec.query_len {
            return Err(mismatch("attention(q)", qv, kv));
        }
        if kv.rows() != spec.batch * spec.key_len || kv.shape() != vv.shape() || kv.cols() != width {
            return Err(mismatch("attention(k,v)", kv, vv));
        }
        if spec.key_mask.len() != spec.batch * spec.key_len {
            return Err(Error::Dimension {
                op: "attention(mask)",
                lhs: vec![spec.batch, spec.key_len],
                rhs: vec![spec.key_mask.len()],
            });
        }
        let (out, probs) = kernels::attention(&spec, width, qv.data(), kv.data(), vv.data());
        let t = Tensor::raw(qv.shape().to_vec(), out);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                spec: Box::new(spec),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mask-aware pooling of `[batch·len × width]` into `[batch × width]`.
    pub fn pool(&mut self, x: Var, mask: &[bool], len: usize, kind: Pooling) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.cols();
        if len == 0 || xv.rows() % len != 0 || mask.len() != xv.rows() {
            return Err(Error::Dimension {
                op: "pool",
                lhs: xv.shape().to_vec(),
                rhs: vec![mask.len(), len],
            });
        }
        let batch = xv.rows() / len;
        let mut out = vec![0.0; batch * width];
        let mut argmax = Vec::new();
        for b in 0..batch {
            let valid: Vec<usize> = (0..len).filter(|&t| mask[b * len + t]).collect();
            if valid.is_empty() {
                return Err(Error::Degenerate(format!("pool: row {b} is fully masked")));
            }
            let orow = &mut out[b * width..(b + 1) * width];
            match kind {
                Pooling::Mean => {
                    for &t in &valid {
                        for (o, v) in orow.iter_mut().zip(xv.row(b * len + t)) {
                            *o += v;
                        }
                    }
                    let n = valid.len() as f64;
                    orow.iter_mut().for_each(|o| *o /= n);
                }
                Pooling::Max => {
                    for c in 0..width {
                        let mut best = valid[0];
                        for &t in &valid[1..] {
                            if xv.row(b * len + t)[c] > xv.row(b * len + best)[c] {
                                best = t;
                            }
                        }
                        orow[c] = xv.row(b * len + best)[c];
                        argmax.push(best);
                    }
                }
            }
        }
        let t = Tensor::raw(vec![batch, width], out);
        Ok(self.push(
            t,
            Op::Pool {
                x,
                mask: mask.to_vec(),
                len,
                kind,
                argmax,
            },
            &[x],
        ))
    }

    /// Mean token-level negative log-likelihood over rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, gold: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, v) = (lv.rows(), lv.cols());
        if gold.len() != rows || mask.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![gold.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate(
                "translation loss: every target position is masked".into(),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            if !mask[r] {
                continue;
            }
            if gold[r] >= v {
                return Err(Error::Index {
                    index: gold[r],
                    size: v,
                });
            }
            // log-sum-exp on the raw logits for an accurate -log p
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[gold[r]];
            kernels::softmax_row(row);
        }
        let loss = total / count as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                gold: gold.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Normalized cross-correlation between the columns of two `[B×d]` batches.
    ///
    /// Column norms below `guard` are clamped to `guard`; with `guard = None`
    /// a zero-norm column is an error.
    pub fn correlation(&mut self, zs: Var, zt: Var, guard: Option<f64>) -> Result<Var> {
        let (sv, tv) = (self.value(zs), self.value(zt));
        if sv.shape().len() != 2 || sv.shape() != tv.shape() {
            return Err(mismatch("cross_correlation", sv, tv));
        }
        let (b, d) = (sv.rows(), sv.cols());
        if b < 2 {
            return Err(Error::BatchTooSmall {
                op: "cross_correlation",
                rows: b,
            });
        }
        let norms = |t: &Tensor, side: &'static str| -> Result<(Vec<f64>, Vec<bool>)> {
            let mut n = vec![0.0; d];
            let mut clamped = vec![false; d];
            for r in 0..b {
                for (acc, x) in n.iter_mut().zip(t.row(r)) {
                    *acc += x * x;
                }
            }
            for (i, v) in n.iter_mut().enumerate() {
                *v = v.sqrt();
                match guard {
                    Some(g) if *v < g => {
                        *v = g;
                        clamped[i] = true;
                    }
                    None if *v == 0.0 => return Err(Error::DivisionGuard { side, column: i }),
                    _ => {}
                }
            }
            Ok((n, clamped))
        };
        let (norm_s, clamped_s) = norms(sv, "source")?;
        let (norm_t, clamped_t) = norms(tv, "target")?;
        let mut c = vec![0.0; d * d];
        for r in 0..b {
            let (s, t) = (sv.row(r), tv.row(r));
            for i in 0..d {
                let si = s[i];
                let crow = &mut c[i * d..(i + 1) * d];
                for (cij, tj) in crow.iter_mut().zip(t) {
                    *cij += si * tj;
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] /= norm_s[i] * norm_t[j];
            }
        }
        Ok(self.push(
            Tensor::raw(vec![d, d], c),
            Op::Correlation {
                zs,
                zt,
                norm_s,
                norm_t,
                clamped_s,
                clamped_t,
            },
            &[zs, zt],
        ))
    }

    /// `Σᵢ(1−Cᵢᵢ)² + λ·Σᵢ Σ_{j≠i} Cᵢⱼ²` for a square matrix.
    pub fn barlow_twins(&mut self, c: Var, lambda: f64) -> Result<Var> {
        let cv = self.value(c);
        if cv.shape().len() != 2 || cv.shape()[0] != cv.shape()[1] {
            return Err(Error::Dimension {
                op: "barlow_twins",
                lhs: cv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (inv, red) = barlow_terms(cv);
        Ok(self.push(Tensor::scalar(inv + lambda * red), Op::BarlowTwins { c, lambda }, &[c]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // only keep gradients that callers can ask for meaningfully
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                if let Some(da) = self.slot(*a, grads) {
                    kernels::matmul_grad_lhs(m, k, n, g, bv.data(), da);
                }
                if let Some(db) = self.slot(*b, grads) {
                    kernels::matmul_grad_rhs(m, k, n, av.data(), g, db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(*v, grads) {
                        axpy(d, g);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(da) = self.slot(*a, grads) {
                    axpy(da, g);
                }
                if let Some(db) = self.slot(*bias, grads) {
                    let c = db.len();
                    for row in g.chunks(c) {
                        axpy(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(*a, grads) {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = self.slot(*b, grads) {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.slot(*a, grads) {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi * s;
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(da) = self.slot(*a, grads) {
                    for ((d, gi), x) in da.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(*a, grads) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Softmax(a) => {
                let c = out.cols();
                if let Some(da) = self.slot(*a, grads) {
                    for ((drow, grow), prow) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let inner = kernels::dot(grow, prow);
                        for ((d, gi), p) in drow.iter_mut().zip(grow).zip(prow) {
                            *d += p * (gi - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                if let Some(dg) = self.slot(*gain, grads) {
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, gi), xh) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += gi * xh;
                        }
                    }
                }
                if let Some(db) = self.slot(*bias, grads) {
                    for grow in g.chunks(c) {
                        axpy(db, grow);
                    }
                }
                let gv = self.value(*gain).data();
                if let Some(dx) = self.slot(*x, grads) {
                    let mut dxhat = vec![0.0; c];
                    for (r, ((grow, xrow), dxrow)) in g.chunks(c).zip(xhat.chunks(c)).zip(dx.chunks_mut(c)).enumerate()
                    {
                        for ((o, gi), gg) in dxhat.iter_mut().zip(grow).zip(gv) {
                            *o = gi * gg;
                        }
                        kernels::standardize_grad(xrow, inv_std[r], &dxhat, dxrow);
                    }
                }
            }
            Op::BatchNorm { x, xhat, inv_std } => {
                let (rows, cols) = (out.rows(), out.cols());
                if let Some(dx) = self.slot(*x, grads) {
                    let mut xcol = vec![0.0; rows];
                    let mut gcol = vec![0.0; rows];
                    let mut dcol = vec![0.0; rows];
                    for c in 0..cols {
                        for r in 0..rows {
                            xcol[r] = xhat[r * cols + c];
                            gcol[r] = g[r * cols + c];
                        }
                        dcol.fill(0.0);
                        kernels::standardize_grad(&xcol, inv_std[c], &gcol, &mut dcol);
                        for r in 0..rows {
                            dx[r * cols + c] += dcol[r];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let n = out.cols();
                if let Some(dt) = self.slot(*table, grads) {
                    for (&id, grow) in ids.iter().zip(g.chunks(n)) {
                        axpy(&mut dt[id * n..(id + 1) * n], grow);
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => self.attention_backward(*q, *k, *v, spec, probs, g, grads),
            Op::Pool {
                x,
                mask,
                len,
                kind,
                argmax,
            } => {
                let width = out.cols();
                let batch = out.rows();
                if let Some(dx) = self.slot(*x, grads) {
                    for b in 0..batch {
                        let grow = &g[b * width..(b + 1) * width];
                        match kind {
                            Pooling::Mean => {
                                let valid: Vec<usize> = (0..*len).filter(|&t| mask[b * len + t]).collect();
                                let n = valid.len() as f64;
                                for t in valid {
                                    let drow = &mut dx[(b * len + t) * width..][..width];
                                    for (d, gi) in drow.iter_mut().zip(grow) {
                                        *d += gi / n;
                                    }
                                }
                            }
                            Pooling::Max => {
                                for (c, gi) in grow.iter().enumerate() {
                                    let t = argmax[b * width + c];
                                    dx[(b * len + t) * width + c] += gi;
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                gold,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                if let Some(dl) = self.slot(*logits, grads) {
                    for (r, (drow, prow)) in dl.chunks_mut(v).zip(probs.chunks(v)).enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        for (d, p) in drow.iter_mut().zip(prow) {
                            *d += scale * p;
                        }
                        drow[gold[r]] -= scale;
                    }
                }
            }
            Op::Correlation {
                zs,
                zt,
                norm_s,
                norm_t,
                clamped_s,
                clamped_t,
            } => {
                let d = out.cols();
                let c = out.data();
                let (sv, tv) = (self.value(*zs), self.value(*zt));
                let b = sv.rows();
                // dL/dS where S = Zsᵀ Zt
                let mut ds = vec![0.0; d * d];
                let mut dnorm_s = vec![0.0; d];
                let mut dnorm_t = vec![0.0; d];
                for i in 0..d {
                    for j in 0..d {
                        let gij = g[i * d + j];
                        ds[i * d + j] = gij / (norm_s[i] * norm_t[j]);
                        let gc = gij * c[i * d + j];
                        dnorm_s[i] -= gc / norm_s[i];
                        dnorm_t[j] -= gc / norm_t[j];
                    }
                }
                if let Some(dzs) = self.slot(*zs, grads) {
                    for r in 0..b {
                        let trow = tv.row(r);
                        let srow = sv.row(r);
                        let drow = &mut dzs[r * d..(r + 1) * d];
                        for i in 0..d {
                            let mut acc = kernels::dot(&ds[i * d..(i + 1) * d], trow);
                            if !clamped_s[i] {
                                acc += dnorm_s[i] * srow[i] / norm_s[i];
                            }
                            drow[i] += acc;
                        }
                    }
                }
                if let Some(dzt) = self.slot(*zt, grads) {
                    for r in 0..b {
                        let trow = tv.row(r);
                        let srow = sv.row(r);
                        let drow = &mut dzt[r * d..(r + 1) * d];
                        for j in 0..d {
                            let mut acc = 0.0;
                            for i in 0..d {
                                acc += ds[i * d + j] * srow[i];
                            }
                            if !clamped_t[j] {
                                acc += dnorm_t[j] * trow[j] / norm_t[j];
                            }
                            drow[j] += acc;
                        }
                    }
                }
            }
            Op::BarlowTwins { c, lambda } => {
                let cv = self.value(*c);
                let d = cv.cols();
                if let Some(dc) = self.slot(*c, grads) {
                    for i in 0..d {
                        for j in 0..d {
                            let x = cv.data()[i * d + j];
                            dc[i * d + j] += g[0] * if i == j { -2.0 * (1.0 - x) } else { 2.0 * lambda * x };
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        let AttentionSpec {
            batch,
            query_len: tq,
            key_len: tk,
            heads,
            ..
        } = *spec;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let prow = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                    let gi = &g[(b * tq + i) * width + off..][..dh];
                    let qi = &qv.data()[(b * tq + i) * width + off..][..dh];
                    let mut inner = 0.0;
                    for j in 0..tk {
                        if !spec.allowed(b, i, j) {
                            continue;
                        }
                        let vj = &vv.data()[(b * tk + j) * width + off..][..dh];
                        dp[j] = kernels::dot(gi, vj);
                        inner += prow[j] * dp[j];
                        let dvj = &mut dv[(b * tk + j) * width + off..][..dh];
                        for (d, x) in dvj.iter_mut().zip(gi) {
                            *d += prow[j] * x;
                        }
                    }
                    for j in 0..tk {
                        if !spec.allowed(b, i, j) {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - inner) * scale;
                        let kj = &kv.data()[(b * tk + j) * width + off..][..dh];
                        let dqi = &mut dq[(b * tq + i) * width + off..][..dh];
                        for (d, x) in dqi.iter_mut().zip(kj) {
                            *d += ds * x;
                        }
                        let dkj = &mut dk[(b * tk + j) * width + off..][..dh];
                        for (d, x) in dkj.iter_mut().zip(qi) {
                            *d += ds * x;
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.slot(var, grads) {
                axpy(slot, &local);
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not require a gradient.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `(Σᵢ(1−Cᵢᵢ)², Σᵢ Σ_{j≠i} Cᵢⱼ²)`
pub(crate) fn barlow_terms(c: &Tensor) -> (f64, f64) {
    let d = c.cols();
    let mut inv = 0.0;
    let mut red = 0.0;
    for i in 0..d {
        for j in 0..d {
            let x = c.data()[i * d + j];
            if i == j {
                inv += (1.0 - x) * (1.0 - x);
            } else {
                red += x * x;
            }
        }
    }
    (inv, red)
}
