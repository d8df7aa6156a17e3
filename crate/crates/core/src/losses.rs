//! Translation cross-entropy and the Barlow Twins redundancy-reduction loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{barlow_terms, Graph, Tensor, Var, NORM_EPS};

/// Column norms below this are clamped in the correlation denominator.
pub const CORRELATION_GUARD: f64 = 1e-9;

/// Default weight of the redundancy term.
pub const DEFAULT_LAMBDA: f64 = 5e-3;

/// Mean negative log-likelihood of `gold` over unmasked positions.
///
/// `logits` is `[…, V]` with one row per target position; `gold[r]` is the
/// token the row should predict.
pub fn translation_loss(logits: &Tensor, gold: &[usize], mask: &[bool]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, gold, mask)?;
    Ok(g.scalar(loss))
}

/// `d×d` cross-correlation between two batches of projections.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrelation {
    pub values: Tensor,
}

impl CrossCorrelation {
    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.data()[i * self.dim() + j]
    }

    /// Sum of squared off-diagonal entries.
    pub fn off_diagonal_energy(&self) -> f64 {
        barlow_terms(&self.values).1
    }

    pub fn transpose(&self) -> CrossCorrelation {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[j * d + i] = self.get(i, j);
            }
        }
        CrossCorrelation {
            values: Tensor::raw(vec![d, d], out),
        }
    }
}

/// Both terms of the loss and the weight that combined them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CELossBreakdown {
    pub total: f64,
    pub invariance_term: f64,
    pub redundancy_term: f64,
    pub lambda: f64,
}

impl CELossBreakdown {
    pub fn from_correlation(c: &CrossCorrelation, lambda: f64) -> Self {
        let (invariance_term, redundancy_term) = barlow_terms(&c.values);
        Self {
            total: invariance_term + lambda * redundancy_term,
            invariance_term,
            redundancy_term,
            lambda,
        }
    }
}

/// Batch-normalizes both inputs, then correlates their columns.
pub fn cross_correlation(zs: &Tensor, zt: &Tensor) -> Result<CrossCorrelation> {
    let mut g = Graph::new();
    let (s, t) = (g.constant(zs.clone()), g.constant(zt.clone()));
    let c = correlate_normalized(&mut g, s, t)?;
    Ok(CrossCorrelation {
        values: g.value(c).clone(),
    })
}

/// Correlates columns directly, without the preceding batch normalization.
/// `guard = None` turns a zero-norm column into an error.
pub fn cross_correlation_raw(zs: &Tensor, zt: &Tensor, guard: Option<f64>) -> Result<CrossCorrelation> {
    let mut g = Graph::new();
    let (s, t) = (g.constant(zs.clone()), g.constant(zt.clone()));
    let c = g.correlation(s, t, guard)?;
    Ok(CrossCorrelation {
        values: g.value(c).clone(),
    })
}

pub fn barlow_twins_loss(zs: &Tensor, zt: &Tensor, lambda: f64) -> Result<CELossBreakdown> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let c = cross_correlation(zs, zt)?;
    Ok(CELossBreakdown::from_correlation(&c, lambda))
}

/// Graph form: batch norm on both sides, then the guarded correlation.
pub fn correlate_normalized(g: &mut Graph, zs: Var, zt: Var) -> Result<Var> {
    let s = g.batch_norm(zs, NORM_EPS)?;
    let t = g.batch_norm(zt, NORM_EPS)?;
    g.correlation(s, t, Some(CORRELATION_GUARD))
}

/// Graph form of the full objective; returns `(correlation, loss)`.
/// Accepts `lambda = 0` so the redundancy term can be switched off.
pub fn barlow_twins_objective(g: &mut Graph, zs: Var, zt: Var, lambda: f64) -> Result<(Var, Var)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let c = correlate_normalized(g, zs, zt)?;
    let loss = g.barlow_twins(c, lambda)?;
    Ok((c, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn hadamard() -> Tensor {
        m(&[&[1., 1.], &[1., -1.], &[-1., 1.], &[-1., -1.]])
    }

    fn random(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor {
        Tensor::new(vec![b, d], (0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Independent evaluation: explicit batch statistics, then the
    /// normalized correlation with explicit loops.
    fn oracle(zs: &Tensor, zt: &Tensor, lambda: f64) -> (Vec<Vec<f64>>, f64) {
        let (b, d) = (zs.rows(), zs.cols());
        let bn = |z: &Tensor| -> Vec<Vec<f64>> {
            let mut out = vec![vec![0.0; d]; b];
            for j in 0..d {
                let mean: f64 = (0..b).map(|r| z.at(&[r, j])).sum::<f64>() / b as f64;
                let var: f64 = (0..b).map(|r| (z.at(&[r, j]) - mean).powi(2)).sum::<f64>() / b as f64;
                for r in 0..b {
                    out[r][j] = (z.at(&[r, j]) - mean) / (var + NORM_EPS).sqrt();
                }
            }
            out
        };
        let (s, t) = (bn(zs), bn(zt));
        let mut c = vec![vec![0.0; d]; d];
        let mut loss = 0.0;
        for i in 0..d {
            for j in 0..d {
                let num: f64 = (0..b).map(|r| s[r][i] * t[r][j]).sum();
                let ns = (0..b)
                    .map(|r| s[r][i].powi(2))
                    .sum::<f64>()
                    .sqrt()
                    .max(CORRELATION_GUARD);
                let nt = (0..b)
                    .map(|r| t[r][j].powi(2))
                    .sum::<f64>()
                    .sqrt()
                    .max(CORRELATION_GUARD);
                c[i][j] = num / (ns * nt);
                loss += if i == j {
                    (1.0 - c[i][j]).powi(2)
                } else {
                    lambda * c[i][j].powi(2)
                };
            }
        }
        (c, loss)
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let logits = Tensor::zeros(&[3, 4]);
        let loss = translation_loss(&logits, &[0, 1, 3], &[true; 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_zero() {
        let mut logits = Tensor::zeros(&[2, 3]);
        logits.data_mut()[1] = 100.0;
        logits.data_mut()[3 + 2] = 100.0;
        let loss = translation_loss(&logits, &[1, 2], &[true, true]).unwrap();
        assert!(loss < 1e-40);
    }

    #[test]
    fn hand_case_matches_per_token_enumeration() {
        let logits = m(&[&[0.5, -1.0, 2.0], &[1.5, 0.25, -0.75]]);
        let gold = [2, 0];
        let nll = |row: &[f64], g: usize| -> f64 {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[g].exp() / z).ln()
        };
        let want = (nll(logits.row(0), 2) + nll(logits.row(1), 0)) / 2.0;
        let got = translation_loss(&logits, &gold, &[true, true]).unwrap();
        assert!((got - want).abs() < 1e-10);
        // masked rows do not count
        let got = translation_loss(&logits, &gold, &[true, false]).unwrap();
        assert!((got - nll(logits.row(0), 2)).abs() < 1e-10);
    }

    #[test]
    fn fully_masked_is_degenerate() {
        let err = translation_loss(&Tensor::zeros(&[2, 3]), &[0, 0], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn correlation_fixed_points() {
        let z = m(&[&[1.], &[-1.]]);
        let c = cross_correlation(&z, &z).unwrap();
        assert!((c.get(0, 0) - 1.0).abs() < 1e-12);
        let anti = m(&[&[-1.], &[1.]]);
        let c = cross_correlation(&z, &anti).unwrap();
        assert!((c.get(0, 0) + 1.0).abs() < 1e-12);
        let c = cross_correlation(&hadamard(), &hadamard()).unwrap();
        assert!(c.values.max_abs_diff(&Tensor::identity(2)) < 1e-12);
    }

    #[test]
    fn loss_fixed_points() {
        let l = barlow_twins_loss(&hadamard(), &hadamard(), DEFAULT_LAMBDA).unwrap();
        assert!(l.total.abs() < 1e-12);
        let l = barlow_twins_loss(&m(&[&[1.], &[-1.]]), &m(&[&[-1.], &[1.]]), DEFAULT_LAMBDA).unwrap();
        assert!((l.total - 4.0).abs() < 1e-12);
        assert_eq!(l.redundancy_term, 0.0);
    }

    #[test]
    fn random_batch_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (zs, zt) = (random(&mut rng, 6, 3), random(&mut rng, 6, 3));
        let (c_want, loss_want) = oracle(&zs, &zt, 5e-3);
        let c = cross_correlation(&zs, &zt).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((c.get(i, j) - c_want[i][j]).abs() < 1e-12);
            }
        }
        let l = barlow_twins_loss(&zs, &zt, 5e-3).unwrap();
        assert!((l.total - loss_want).abs() < 1e-12);
    }

    #[test]
    fn tiny_lambda_leaves_invariance_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (zs, zt) = (random(&mut rng, 8, 4), random(&mut rng, 8, 4));
        let l = barlow_twins_loss(&zs, &zt, 1e-300).unwrap();
        assert_eq!(l.total, l.invariance_term);
    }

    #[test]
    fn lambda_must_be_positive() {
        assert!(barlow_twins_loss(&hadamard(), &hadamard(), 0.0).is_err());
    }

    #[test]
    fn zero_column_without_guard_is_an_error() {
        let zs = m(&[&[0., 1.], &[0., -1.]]);
        let err = cross_correlation_raw(&zs, &zs, None).unwrap_err();
        assert!(matches!(err, Error::DivisionGuard { column: 0, .. }));
        let c = cross_correlation_raw(&zs, &zs, Some(CORRELATION_GUARD)).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
        assert!((c.get(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn raw_path_skips_centering() {
        let zs = m(&[&[2.], &[1.]]);
        let raw = cross_correlation_raw(&zs, &zs, None).unwrap();
        assert!((raw.get(0, 0) - 1.0).abs() < 1e-15);
        let shifted = m(&[&[2.], &[-1.]]);
        let c = cross_correlation_raw(&zs, &shifted, None).unwrap();
        assert!((c.get(0, 0) - 3.0 / (5f64.sqrt() * 5f64.sqrt())).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn identical_views_have_perfect_diagonal(b in 3usize..9, d in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random(&mut rng, b, d);
            let l = barlow_twins_loss(&z, &z, DEFAULT_LAMBDA).unwrap();
            prop_assert!(l.invariance_term < 1e-12);
        }

        #[test]
        fn column_rescaling_invariance(
            b in 3usize..9, d in 1usize..5, seed in any::<u64>(), scale in 0.01f64..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (zs, zt) = (random(&mut rng, b, d), random(&mut rng, b, d));
            let col = rng.random_range(0..d);
            let rescale = |z: &Tensor| {
                let mut z = z.clone();
                for r in 0..b {
                    z.data_mut()[r * d + col] *= scale;
                }
                z
            };
            let before = barlow_twins_loss(&zs, &zt, 0.1).unwrap().total;
            let after = barlow_twins_loss(&rescale(&zs), &rescale(&zt), 0.1).unwrap().total;
            prop_assert!((before - after).abs() < 1e-10, "{before} vs {after}");
        }

        #[test]
        fn swapping_views_transposes(b in 2usize..9, d in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (zs, zt) = (random(&mut rng, b, d), random(&mut rng, b, d));
            let c = cross_correlation(&zs, &zt).unwrap();
            let ct = cross_correlation(&zt, &zs).unwrap();
            prop_assert!(c.transpose().values.max_abs_diff(&ct.values) < 1e-15);
            let a = barlow_twins_loss(&zs, &zt, 0.2).unwrap().total;
            let bb = barlow_twins_loss(&zt, &zs, 0.2).unwrap().total;
            prop_assert!((a - bb).abs() < 1e-12);
            for v in c.values.data() {
                prop_assert!(v.abs() <= 1.0 + 1e-6);
            }
        }
    }
}
