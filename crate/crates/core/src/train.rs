//! SGD training loop over the expert-parallel runtime, with per-step metrics.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{build_model, check_utterance, Model};
use crate::parallel::{make_shards, step_parallel};
use crate::scalar::Scalar;

pub const METRICS_HEADER: &str = "step,l_c,l_s,l_m,l_e,l_a,l_d,total,util_entropy_mean";

/// Stream of the batch-sampling RNG; keeps it apart from parameter initialization.
const BATCH_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub loss: LossBreakdown,
    /// Frames routed to each expert, per MoE layer.
    pub utilization: Vec<Vec<usize>>,
    /// Mean over layers of the entropy (nats) of the utilization histogram.
    pub util_entropy_mean: f64,
    pub wall: Duration,
}

impl StepMetrics {
    /// One CSV row matching [`METRICS_HEADER`]; wall time is left out so runs compare byte for byte.
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, l.l_c, l.l_s, l.l_m, l.l_e, l.l_a, l.l_d, l.total, self.util_entropy_mean
        )
    }
}

/// Entropy in nats of a count histogram; 0 for an empty one.
pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

#[derive(Clone, Debug)]
pub struct Trainer<S: Scalar = f64> {
    pub model: Model<S>,
    /// Number of steps taken so far.
    pub step: u64,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        rng.set_stream(BATCH_STREAM);
        Trainer { model, step: 0, rng }
    }

    pub fn from_config(config: &crate::ModelConfig) -> Result<Self> {
        Ok(Self::new(build_model(config)?))
    }

    /// Restores a trainer from a checkpoint's parts.
    pub fn resume(model: Model<S>, step: u64, rng: ChaCha8Rng) -> Self {
        Trainer { model, step, rng }
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Sorted batch indices drawn without replacement.
    fn sample_batch(&mut self, corpus_len: usize) -> Vec<usize> {
        let size = self.model.config.batch_size.min(corpus_len);
        let mut idx = index::sample(&mut self.rng, corpus_len, size).into_vec();
        idx.sort_unstable();
        idx
    }

    /// One SGD step on a freshly sampled batch.
    pub fn step(&mut self, corpus: &[Utterance]) -> Result<StepMetrics> {
        if corpus.is_empty() {
            return Err(Error::EmptySequence("training corpus is empty".into()));
        }
        let started = Instant::now();
        let step = self.step + 1;
        let idx = self.sample_batch(corpus.len());
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &corpus[i]).collect();
        let cfg = &self.model.config;
        let mut shards = make_shards(&batch, cfg.n_experts, cfg.n_workers.min(batch.len()))?;
        let result = step_parallel(&mut shards, &self.model, cfg.aux_scope).map_err(|e| match e {
            Error::Numeric { term, value } => Error::Divergence { step, term, value },
            other => other,
        })?;
        let mut grads = result.grads;
        let norm = grads.norm_sq().sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                term: "gradient".into(),
                value: norm,
            });
        }
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            grads.scale_in_place(S::lit(cfg.clip_norm / norm));
        }
        let lr = S::lit(cfg.learning_rate);
        let n_experts = cfg.n_experts;
        self.model.axpy(-lr, &grads)?;
        self.step = step;
        let utilization = {
            let mut hist = vec![vec![0; n_experts]; result.selected.len()];
            for (h, sel) in hist.iter_mut().zip(&result.selected) {
                sel.iter().for_each(|&e| h[e] += 1);
            }
            hist
        };
        let util_entropy_mean = if utilization.is_empty() {
            0.0
        } else {
            utilization.iter().map(|h| entropy(h)).sum::<f64>() / utilization.len() as f64
        };
        Ok(StepMetrics {
            step,
            loss: result.loss,
            utilization,
            util_entropy_mean,
            wall: started.elapsed(),
        })
    }

    /// Runs until `self.step == steps`, writing one CSV row per step (header first when starting from 0).
    pub fn run<W: Write>(&mut self, corpus: &[Utterance], steps: u64, mut metrics: Option<&mut W>) -> Result<Vec<StepMetrics>> {
        for utt in corpus {
            check_utterance(&self.model.config, utt)?;
        }
        if let (Some(w), 0) = (metrics.as_deref_mut(), self.step) {
            writeln!(w, "{METRICS_HEADER}")?;
        }
        let mut out = Vec::new();
        while self.step < steps {
            let m = self.step(corpus)?;
            if let Some(w) = metrics.as_deref_mut() {
                writeln!(w, "{}", m.csv_row())?;
            }
            log::debug!("step {} total {:.4} ({:?})", m.step, m.loss.total, m.wall);
            out.push(m);
        }
        Ok(out)
    }
}
