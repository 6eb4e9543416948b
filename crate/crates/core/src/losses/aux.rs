//! Router regularizers: the sparsity L1 loss on unit-normalized distributions
//! and the mean-importance balance loss.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Router probabilities of all `k` frames at one layer, frame-major (`k×n`).
#[derive(Clone, Debug, PartialEq)]
pub struct RouterBatch<S: Scalar = f64> {
    probs: Tensor<S>,
}

fn row_tolerance<S: Scalar>() -> f64 {
    (S::epsilon().as_f64() * 1e3).max(1e-10)
}

impl<S: Scalar> RouterBatch<S> {
    pub fn new(probs: Tensor<S>) -> Result<Self> {
        if probs.rank() != 2 {
            return Err(dim_err(format!("router batch must be k×n, got {:?}", probs.shape())));
        }
        let tol = row_tolerance::<S>();
        for j in 0..probs.rows() {
            let row = probs.row(j);
            let s: S = row.iter().copied().sum();
            if row.iter().any(|&p| p < S::zero()) || (s.as_f64() - 1.0).abs() > tol {
                return Err(Error::Degenerate(format!(
                    "frame {j} is not a probability distribution (sum {s})"
                )));
            }
        }
        Ok(RouterBatch { probs })
    }

    /// Wraps rows without the distribution check. Both losses are defined on
    /// any rows with a nonzero L2 norm, which is what finite differences need.
    pub fn from_raw(probs: Tensor<S>) -> Result<Self> {
        if probs.rank() != 2 {
            return Err(dim_err(format!("router batch must be k×n, got {:?}", probs.shape())));
        }
        Ok(RouterBatch { probs })
    }

    /// Builds a batch from per-frame distributions.
    pub fn from_rows(rows: &[&[S]]) -> Result<Self> {
        let n = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() || n == 0 {
            return Err(Error::EmptySequence("router batch with no frames".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            if r.len() != n {
                return Err(dim_err("router distributions of unequal width"));
            }
            data.extend_from_slice(r);
        }
        Self::new(Tensor::matrix(rows.len(), n, data)?)
    }

    /// Concatenates batches in the given order.
    pub fn concat(parts: &[RouterBatch<S>]) -> Result<Self> {
        let refs: Vec<&Tensor<S>> = parts.iter().map(|b| &b.probs).collect();
        Ok(RouterBatch {
            probs: crate::tensor::concat(&refs, 0)?,
        })
    }

    pub fn probs(&self) -> &Tensor<S> {
        &self.probs
    }

    pub fn frames(&self) -> usize {
        self.probs.rows()
    }

    pub fn experts(&self) -> usize {
        self.probs.cols()
    }
}

/// `L_s = (1/k) Σ_j ‖p_j / ‖p_j‖₂‖₁`; 1 for one-hot rows, `√n` for uniform rows.
pub fn sparsity_loss<S: Scalar>(batch: &RouterBatch<S>) -> Result<(S, Tensor<S>)> {
    let k = batch.frames();
    let inv_k = S::one() / S::lit(k as f64);
    let mut grad = batch.probs.zeros_like();
    let mut total = S::zero();
    for j in 0..k {
        let p = batch.probs.row(j);
        let l1: S = p.iter().map(|x| x.abs()).sum();
        let l2 = p.iter().map(|&x| x * x).sum::<S>().sqrt();
        if l2 == S::zero() {
            return Err(Error::Degenerate(format!("frame {j} has an all-zero distribution")));
        }
        total += l1 / l2;
        // ∂(l1/l2)/∂p_i = sign(p_i)/l2 − l1·p_i/l2³
        let l2_cubed = l2 * l2 * l2;
        for (g, &x) in grad.row_mut(j).iter_mut().zip(p) {
            *g = inv_k * (x.signum() / l2 - l1 * x / l2_cubed);
        }
    }
    Ok((total * inv_k, grad))
}

/// `L_m = n Σ_i ((1/k) Σ_j p_ij)²`; 1 for balanced usage, `n` when collapsed.
pub fn mean_importance_loss<S: Scalar>(batch: &RouterBatch<S>) -> Result<(S, Tensor<S>)> {
    let (k, n) = (batch.frames(), batch.experts());
    let inv_k = S::one() / S::lit(k as f64);
    let n_s = S::lit(n as f64);
    let mut means = vec![S::zero(); n];
    for j in 0..k {
        means.iter_mut().zip(batch.probs.row(j)).for_each(|(m, &p)| *m += p);
    }
    means.iter_mut().for_each(|m| *m *= inv_k);
    let value = n_s * means.iter().map(|&m| m * m).sum::<S>();
    let two = S::lit(2.0);
    let mut grad = batch.probs.zeros_like();
    for j in 0..k {
        for (g, &m) in grad.row_mut(j).iter_mut().zip(&means) {
            *g = two * n_s * m * inv_k;
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(rows: &[Vec<f64>]) -> RouterBatch {
        RouterBatch::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn sparsity_examples() {
        let one_hot = batch(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert!((sparsity_loss(&one_hot).unwrap().0 - 1.0).abs() < 1e-12);
        let uniform = batch(&[vec![0.25; 4], vec![0.25; 4]]);
        assert!((sparsity_loss(&uniform).unwrap().0 - 2.0).abs() < 1e-12);
        let v = sparsity_loss(&batch(&[vec![0.8, 0.2]])).unwrap().0;
        assert!((v - 1.0 / 0.68f64.sqrt()).abs() < 1e-12);
        assert!((v - 1.2127).abs() < 1e-4);
    }

    #[test]
    fn importance_examples() {
        assert!((mean_importance_loss(&batch(&vec![vec![0.25; 4]; 3])).unwrap().0 - 1.0).abs() < 1e-12);
        let collapsed = batch(&vec![vec![1.0, 0.0, 0.0, 0.0]; 5]);
        assert!((mean_importance_loss(&collapsed).unwrap().0 - 4.0).abs() < 1e-12);
        let mixed = batch(&[vec![1.0, 0.0], vec![0.5, 0.5]]);
        assert!((mean_importance_loss(&mixed).unwrap().0 - 1.25).abs() < 1e-12);
    }

    #[test]
    fn degenerate_rows_are_rejected() {
        assert!(matches!(
            RouterBatch::new(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()),
            Err(Error::Degenerate(_))
        ));
        assert!(RouterBatch::new(Tensor::from_rows(&[vec![0.7, 0.7]]).unwrap()).is_err());
    }

    #[test]
    fn one_descent_step_sharpens_a_uniform_row() {
        // exactly uniform is a stationary point on the simplex, so perturb slightly
        let b = batch(&[vec![0.26, 0.25, 0.25, 0.24]]);
        let (before, grad) = sparsity_loss(&b).unwrap();
        let mut p = b.probs().clone();
        p.axpy(-0.01, &grad).unwrap();
        let s = p.sum();
        p.scale_in_place(1.0 / s);
        let (after, _) = sparsity_loss(&RouterBatch::new(p).unwrap()).unwrap();
        assert!(after < before);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let rows = vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.2, 0.6], vec![0.5, 0.25, 0.25]];
        let b = batch(&rows);
        for f in [sparsity_loss::<f64>, mean_importance_loss::<f64>] {
            let (_, grad) = f(&b).unwrap();
            // no renormalization: both losses are defined on the raw rows
            let r = crate::gradcheck::check_tensor("p", b.probs(), &grad, 1e-5, |p| {
                f(&RouterBatch { probs: p.clone() }).unwrap().0
            });
            assert!(r.passes(1e-4), "{r:?}");
        }
    }

    fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn losses_stay_in_their_ranges(
            rows in (1usize..6).prop_flat_map(|n| prop::collection::vec(distribution(n), 1..8)),
            seed in any::<u64>(),
        ) {
            let b = batch(&rows);
            let n = rows[0].len() as f64;
            let (ls, _) = sparsity_loss(&b).unwrap();
            let (lm, _) = mean_importance_loss(&b).unwrap();
            prop_assert!(ls >= 1.0 - 1e-12 && ls <= n.sqrt() + 1e-12);
            prop_assert!(lm >= 1.0 - 1e-12 && lm <= n + 1e-12);

            // permuting frames and experts together leaves L_m unchanged
            let k = rows.len();
            let frame_order: Vec<usize> = (0..k).map(|i| (i + seed as usize) % k).collect();
            let width = rows[0].len();
            let shift = (seed / 7) as usize % width;
            let permuted: Vec<Vec<f64>> = frame_order
                .iter()
                .map(|&j| (0..width).map(|i| rows[j][(i + shift) % width]).collect())
                .collect();
            let (lm2, _) = mean_importance_loss(&batch(&permuted)).unwrap();
            prop_assert!((lm - lm2).abs() < 1e-12);
        }
    }
}
