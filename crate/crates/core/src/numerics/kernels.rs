//! Slice-level forward kernels shared by the plain-tensor API and the graph.

use matrixmultiply::dgemm;

/// `c = a[m×k] · b[k×n]` (overwrites `c`).
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `da[m×k] += dc[m×n] · bᵀ`
pub(crate) fn matmul_grad_lhs(m: usize, k: usize, n: usize, dc: &[f64], b: &[f64], da: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        dgemm(
            m,
            n,
            k,
            1.0,
            dc.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            1.0,
            da.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `db[k×n] += aᵀ · dc[m×n]`
pub(crate) fn matmul_grad_rhs(m: usize, k: usize, n: usize, a: &[f64], dc: &[f64], db: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            dc.as_ptr(),
            n as isize,
            1,
            1.0,
            db.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Max-subtracted softmax of one row, in place.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Normalizes one row to zero mean and unit population variance.
/// Writes the normalized values into `xhat` and returns `1/sqrt(var + eps)`.
pub(crate) fn standardize(x: &[f64], eps: f64, xhat: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for (o, v) in xhat.iter_mut().zip(x) {
        *o = (v - mean) * inv_std;
    }
    inv_std
}

/// Backward of [`standardize`]: given `dxhat`, accumulates into `dx`.
pub(crate) fn standardize_grad(xhat: &[f64], inv_std: f64, dxhat: &[f64], dx: &mut [f64]) {
    let n = xhat.len() as f64;
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / n;
    for ((o, d), x) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o += inv_std * (d - mean_d - x * mean_dx);
    }
}

/// Column-wise batch statistics over `[rows × cols]`, returning `(xhat, inv_std per column)`.
pub(crate) fn batch_standardize(x: &[f64], rows: usize, cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; cols];
    let mut col = vec![0.0; rows];
    let mut out = vec![0.0; rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = x[r * cols + c];
        }
        inv[c] = standardize(&col, eps, &mut out);
        for r in 0..rows {
            xhat[r * cols + c] = out[r];
        }
    }
    (xhat, inv)
}

/// Layout of a multi-head attention call over flattened `[batch·t × width]` rows.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub heads: usize,
    /// `[batch × key_len]`, true where the key is a real token.
    pub key_mask: Vec<bool>,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
}

impl AttentionSpec {
    #[inline]
    pub(crate) fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_mask[b * self.key_len + j] && (!self.causal || j <= i)
    }
}

/// Scaled dot-product attention; returns `(output, probabilities)`.
/// Probabilities are laid out `[batch, heads, query_len, key_len]` with
/// exact zeros on disallowed keys.
pub(crate) fn attention(spec: &AttentionSpec, width: usize, q: &[f64], k: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let AttentionSpec {
        batch,
        query_len: tq,
        key_len: tk,
        heads,
        ..
    } = *spec;
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * tq * width];
    let mut probs = vec![0.0; batch * heads * tq * tk];
    let mut scores = vec![0.0; tk];
    let mut idx = Vec::with_capacity(tk);
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let qi = &q[(b * tq + i) * width + off..][..dh];
                idx.clear();
                for j in 0..tk {
                    if spec.allowed(b, i, j) {
                        idx.push(j);
                    }
                }
                if idx.is_empty() {
                    continue;
                }
                let s = &mut scores[..idx.len()];
                for (slot, &j) in s.iter_mut().zip(&idx) {
                    let kj = &k[(b * tk + j) * width + off..][..dh];
                    *slot = dot(qi, kj) * scale;
                }
                softmax_row(s);
                let prow = &mut probs[((b * heads + h) * tq + i) * tk..][..tk];
                let orow = &mut out[(b * tq + i) * width + off..][..dh];
                for (&p, &j) in s.iter().zip(&idx) {
                    prow[j] = p;
                    let vj = &v[(b * tk + j) * width + off..][..dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
