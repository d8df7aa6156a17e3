//! Minimal differentiable numeric core.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::grad_check;
pub(crate) use graph::barlow_terms;
pub use graph::{Gradients, Graph, Pooling, Var};
pub use kernels::AttentionSpec;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Default epsilon for layer and batch normalization.
pub const NORM_EPS: f64 = 1e-5;

/// `a[…×k] · b[k×n]`; leading dimensions of `a` are treated as rows.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(x, y)?;
    Ok(g.value(out).clone())
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Dimension {
            op: "softmax",
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut lane = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            for (k, v) in lane.iter_mut().enumerate() {
                *v = out[at(k)];
            }
            kernels::softmax_row(&mut lane);
            for (k, v) in lane.iter().enumerate() {
                out[at(k)] = *v;
            }
        }
    }
    Ok(Tensor::raw(shape.to_vec(), out))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let mut g = Graph::new();
    let (x, w, b) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let out = g.layer_norm(x, w, b, eps)?;
    Ok(g.value(out).clone())
}

/// Standardizes each column of `[B×d]` with batch statistics.
pub fn batch_norm_train(x: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Config("batch_norm eps must be positive".into()));
    }
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.batch_norm(v, eps)?;
    Ok(g.value(out).clone())
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::raw(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())
}

/// Gathers rows of `table` for `ids`, producing `[ids.len() × n]`.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let t = g.constant(table.clone());
    let out = g.embedding(t, ids, &[ids.len()])?;
    Ok(g.value(out).clone())
}
