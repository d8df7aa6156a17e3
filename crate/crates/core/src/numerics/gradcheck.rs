use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` receives a fresh graph and one leaf per input, and returns the scalar
/// output node. The result is the maximum over every input coordinate of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], track: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = f(&mut g, &vars)?;
        let y = g.value(out);
        if y.len() != 1 {
            return Err(Error::Dimension {
                op: "grad_check",
                lhs: y.shape().to_vec(),
                rhs: vec![1],
            });
        }
        if !y.data()[0].is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok((g, vars, out))
    };

    let (graph, vars, out) = eval(inputs, true)?;
    let grads = graph.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[slot].len()]);
        for (i, a) in analytic.iter().enumerate() {
            let x0 = inputs[slot].data()[i];
            probe[slot].data_mut()[i] = x0 + eps;
            let (g, _, o) = eval(&probe, false)?;
            let plus = g.scalar(o);
            probe[slot].data_mut()[i] = x0 - eps;
            let (g, _, o) = eval(&probe, false)?;
            let minus = g.scalar(o);
            probe[slot].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
