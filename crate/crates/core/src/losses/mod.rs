//! Training objective: CTC terms, router regularizers, utterance classification
//! losses and their weighted combination.

mod aux;
mod ctc;

pub use aux::{mean_importance_loss, sparsity_loss, RouterBatch};
pub use ctc::{ctc_loss, ctc_loss_from_logits, greedy_decode, log_alignment_count, min_frames, CtcOutput};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Scales of the auxiliary terms relative to the main CTC loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// sparsity
    pub alpha: f64,
    /// mean importance
    pub beta: f64,
    /// embedding-network CTC
    pub gamma: f64,
    /// accent classification
    pub eta: f64,
    /// domain classification
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.05,
            beta: 0.05,
            gamma: 0.01,
            eta: 0.1,
            theta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            eta: 0.0,
            theta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("theta", self.theta),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative weight, got {w}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_c: f64,
    pub l_s: f64,
    pub l_m: f64,
    pub l_e: f64,
    pub l_a: f64,
    pub l_d: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_s: f64,
    pub l_m: f64,
    pub l_e: f64,
    pub l_a: f64,
    pub l_d: f64,
    pub total: f64,
}

/// `total = l_c + α·l_s + β·l_m + γ·l_e + η·l_a + θ·l_d`.
pub fn combine(parts: &LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    for (term, v) in [
        ("l_c", parts.l_c),
        ("l_s", parts.l_s),
        ("l_m", parts.l_m),
        ("l_e", parts.l_e),
        ("l_a", parts.l_a),
        ("l_d", parts.l_d),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric { term: term.into(), value: v });
        }
    }
    let total = parts.l_c
        + w.alpha * parts.l_s
        + w.beta * parts.l_m
        + w.gamma * parts.l_e
        + w.eta * parts.l_a
        + w.theta * parts.l_d;
    Ok(LossBreakdown {
        l_c: parts.l_c,
        l_s: parts.l_s,
        l_m: parts.l_m,
        l_e: parts.l_e,
        l_a: parts.l_a,
        l_d: parts.l_d,
        total,
    })
}

/// Softmax cross-entropy `−log_softmax(logits)[target]` and its gradient on the logits.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, target: usize) -> Result<(S, Tensor<S>)> {
    if logits.rank() != 1 {
        return Err(dim_err(format!("cross_entropy expects a vector, got {:?}", logits.shape())));
    }
    if target >= logits.len() {
        return Err(Error::Label {
            label: target,
            limit: logits.len(),
        });
    }
    let lp = tensor::log_softmax(logits)?;
    let mut grad = Tensor::vector(lp.data().iter().map(|v| v.exp()).collect())?;
    grad.data_mut()[target] -= S::one();
    Ok((-lp.data()[target], grad))
}
