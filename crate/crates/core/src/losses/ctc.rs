//! Connectionist temporal classification loss, computed in log space.
//!
//! The blank symbol is the last class: with `V` graphemes, log-probabilities
//! have `V + 1` columns and the blank index is `V`.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug)]
pub struct CtcOutput<S: Scalar = f64> {
    /// `−log P(labels | input)`
    pub loss: S,
    /// Gradient of the loss with respect to the function's input tensor.
    pub grad: Tensor<S>,
}

fn lse<S: Scalar>(a: S, b: S) -> S {
    if a == S::neg_infinity() {
        return b;
    }
    if b == S::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum number of frames needed to emit `labels`: one per label plus one
/// separating blank between each pair of equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn validate(t_len: usize, n_classes: usize, labels: &[usize]) -> Result<()> {
    let vocab = n_classes - 1;
    if let Some(&bad) = labels.iter().find(|&&l| l >= vocab) {
        return Err(Error::Label { label: bad, limit: vocab });
    }
    let needed = min_frames(labels);
    if needed > t_len {
        return Err(Error::InfeasibleAlignment {
            labels: labels.len(),
            needed,
            frames: t_len,
        });
    }
    Ok(())
}

/// Blank-interleaved label sequence `[∅, l1, ∅, l2, …, ∅]`.
fn extend(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// CTC loss and its gradient with respect to `log_probs` (`T×(V+1)`, rows already normalized).
pub fn ctc_loss<S: Scalar>(log_probs: &Tensor<S>, labels: &[usize]) -> Result<CtcOutput<S>> {
    if log_probs.rank() != 2 || log_probs.cols() < 2 {
        return Err(dim_err(format!(
            "CTC expects T×(V+1) log-probabilities with V ≥ 1, got {:?}",
            log_probs.shape()
        )));
    }
    let (t_len, n_classes) = (log_probs.rows(), log_probs.cols());
    validate(t_len, n_classes, labels)?;
    let blank = n_classes - 1;
    let ext = extend(labels, blank);
    let s_len = ext.len();
    let ninf = S::neg_infinity();
    let lp = |t: usize, s: usize| log_probs.data()[t * n_classes + ext[s]];
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = lse(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }

    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = lse(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = lse(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, s) };
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = lse(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::Numeric {
            term: "ctc".into(),
            value: log_p.as_f64(),
        });
    }

    // ∂(−log P)/∂ log p_t(k) = −Σ_{s: ext[s]=k} α_t(s) β_t(s) / (p_t(k) P)
    let mut grad = log_probs.zeros_like();
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let occ = (a + b - lp(t, s) - log_p).exp();
            grad.data_mut()[t * n_classes + ext[s]] -= occ;
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// CTC on unnormalized logits; the gradient is with respect to the logits.
pub fn ctc_loss_from_logits<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<CtcOutput<S>> {
    let log_probs = tensor::log_softmax(logits)?;
    let out = ctc_loss(&log_probs, labels)?;
    let grad = tensor::log_softmax_backward(&log_probs, &out.grad)?;
    Ok(CtcOutput { loss: out.loss, grad })
}

/// Natural log of the number of frame-level alignments of `labels` over `t_len` frames.
pub fn log_alignment_count(t_len: usize, labels: &[usize]) -> Result<f64> {
    let blank = labels.iter().copied().max().map_or(1, |m| m + 1);
    let uniform = Tensor::<f64>::zeros(&[t_len, blank + 1]);
    Ok(-ctc_loss(&uniform, labels)?.loss)
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn greedy_decode<S: Scalar>(log_probs: &Tensor<S>) -> Vec<usize> {
    let blank = log_probs.cols() - 1;
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let best = crate::layers::argmax(log_probs.row(t));
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}
