//! Evaluation: CTC loss, greedy-decode token error rate and expert
//! utilization, broken down by domain and accent.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::losses::{ctc_loss, greedy_decode, log_alignment_count};
use crate::model::{check_utterance, Model};
use crate::scalar::Scalar;
use crate::train::entropy;

/// Levenshtein distance between two label sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean CTC loss of a model whose every frame posterior is uniform over `V+1` classes.
pub fn uniform_posterior_loss(corpus: &[Utterance], vocab: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptySequence("corpus is empty".into()));
    }
    let ln_classes = ((vocab + 1) as f64).ln();
    let mut total = 0.0;
    for u in corpus {
        total += u.len() as f64 * ln_classes - log_alignment_count(u.len(), &u.labels)?;
    }
    Ok(total / corpus.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupMetrics {
    pub id: usize,
    pub utterances: usize,
    pub mean_ctc: f64,
    pub token_error_rate: f64,
    /// Frames per expert, per MoE layer.
    pub utilization: Vec<Vec<usize>>,
    /// Utilization entropy (nats) per layer.
    pub entropy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub utterances: usize,
    pub mean_ctc: f64,
    pub token_error_rate: f64,
    pub by_domain: Vec<GroupMetrics>,
    pub by_accent: Vec<GroupMetrics>,
    /// Per utterance, per layer, frames routed to each expert.
    pub routing: Vec<Vec<Vec<usize>>>,
}

struct Acc {
    n: usize,
    ctc: f64,
    errors: usize,
    ref_len: usize,
    util: Vec<Vec<usize>>,
}

impl Acc {
    fn new(layers: usize, experts: usize) -> Self {
        Acc {
            n: 0,
            ctc: 0.0,
            errors: 0,
            ref_len: 0,
            util: vec![vec![0; experts]; layers],
        }
    }

    fn add(&mut self, ctc: f64, errors: usize, ref_len: usize, routing: &[Vec<usize>]) {
        self.n += 1;
        self.ctc += ctc;
        self.errors += errors;
        self.ref_len += ref_len;
        for (a, r) in self.util.iter_mut().zip(routing) {
            a.iter_mut().zip(r).for_each(|(x, &y)| *x += y);
        }
    }

    fn finish(self, id: usize) -> GroupMetrics {
        GroupMetrics {
            id,
            utterances: self.n,
            mean_ctc: self.ctc / self.n as f64,
            token_error_rate: self.errors as f64 / self.ref_len.max(1) as f64,
            entropy: self.util.iter().map(|h| entropy(h)).collect(),
            utilization: self.util,
        }
    }
}

pub fn evaluate<S: Scalar>(model: &Model<S>, corpus: &[Utterance]) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptySequence("evaluation corpus is empty".into()));
    }
    let cfg = &model.config;
    let (layers, experts) = (model.n_layers(), cfg.n_experts);
    let mut all = Acc::new(layers, experts);
    let mut domains: Vec<Option<Acc>> = (0..cfg.n_domains).map(|_| None).collect();
    let mut accents: Vec<Option<Acc>> = (0..cfg.n_accents).map(|_| None).collect();
    let mut routing = Vec::with_capacity(corpus.len());
    for utt in corpus {
        check_utterance(cfg, utt)?;
        let fwd = model.forward(&utt.frames.cast::<S>())?;
        let ctc = ctc_loss(&fwd.log_probs, &utt.labels)?.loss.as_f64();
        let hyp = greedy_decode(&fwd.log_probs);
        let errors = edit_distance(&hyp, &utt.labels);
        let r: Vec<Vec<usize>> = (0..layers)
            .map(|l| {
                let mut h = vec![0; experts];
                fwd.selected(l).iter().for_each(|&e| h[e] += 1);
                h
            })
            .collect();
        all.add(ctc, errors, utt.labels.len(), &r);
        domains[utt.domain_id]
            .get_or_insert_with(|| Acc::new(layers, experts))
            .add(ctc, errors, utt.labels.len(), &r);
        accents[utt.accent_id]
            .get_or_insert_with(|| Acc::new(layers, experts))
            .add(ctc, errors, utt.labels.len(), &r);
        routing.push(r);
    }
    let groups = |v: Vec<Option<Acc>>| -> Vec<GroupMetrics> {
        v.into_iter()
            .enumerate()
            .filter_map(|(id, a)| a.map(|a| a.finish(id)))
            .collect()
    };
    let total = all.finish(0);
    Ok(EvalReport {
        utterances: corpus.len(),
        mean_ctc: total.mean_ctc,
        token_error_rate: total.token_error_rate,
        by_domain: groups(domains),
        by_accent: groups(accents),
        routing,
    })
}

/// Pearson chi-squared statistic of a contingency table; all-zero columns are skipped.
pub fn chi_squared(table: &[Vec<f64>]) -> f64 {
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let n: f64 = rows.iter().sum();
    if n == 0.0 || table.is_empty() {
        return 0.0;
    }
    let cols = table[0].len();
    let mut stat = 0.0;
    for j in 0..cols {
        let col: f64 = table.iter().map(|r| r[j]).sum();
        if col == 0.0 {
            continue;
        }
        for (i, r) in table.iter().enumerate() {
            let expected = rows[i] * col / n;
            if expected > 0.0 {
                stat += (r[j] - expected).powi(2) / expected;
            }
        }
    }
    stat
}

/// Sum over layers of the chi-squared statistic of the group × expert utilization table.
pub fn routing_chi_squared(routing: &[Vec<Vec<usize>>], groups: &[usize], n_groups: usize) -> f64 {
    let Some(first) = routing.first() else { return 0.0 };
    let (layers, experts) = (first.len(), first.first().map_or(0, Vec::len));
    (0..layers)
        .map(|l| {
            let mut table = vec![vec![0.0; experts]; n_groups];
            for (r, &g) in routing.iter().zip(groups) {
                table[g].iter_mut().zip(&r[l]).for_each(|(t, &c)| *t += c as f64);
            }
            chi_squared(&table)
        })
        .sum()
}

/// Observed statistic and its permutation null (group labels shuffled across utterances).
#[derive(Clone, Debug)]
pub struct SpecializationTest {
    pub statistic: f64,
    /// Sorted null statistics.
    pub null: Vec<f64>,
}

impl SpecializationTest {
    /// Empirical quantile of the null distribution.
    pub fn null_quantile(&self, q: f64) -> f64 {
        let idx = ((self.null.len() as f64 - 1.0) * q).round() as usize;
        self.null[idx.min(self.null.len() - 1)]
    }
}

pub fn specialization_test(
    routing: &[Vec<Vec<usize>>],
    groups: &[usize],
    n_groups: usize,
    permutations: usize,
    seed: u64,
) -> SpecializationTest {
    let statistic = routing_chi_squared(routing, groups, n_groups);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = groups.to_vec();
    let mut null: Vec<f64> = (0..permutations.max(1))
        .map(|_| {
            labels.shuffle(&mut rng);
            routing_chi_squared(routing, &labels, n_groups)
        })
        .collect();
    null.sort_by(f64::total_cmp);
    SpecializationTest { statistic, null }
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "utterances {}  mean_ctc {:.4}  token_error_rate {:.4}",
            self.utterances, self.mean_ctc, self.token_error_rate
        );
        for (name, groups) in [("domain", &self.by_domain), ("accent", &self.by_accent)] {
            for g in groups {
                let ent: Vec<String> = g.entropy.iter().map(|e| format!("{e:.3}")).collect();
                let _ = writeln!(
                    s,
                    "{name} {}  n {}  mean_ctc {:.4}  ter {:.4}  util_entropy [{}]",
                    g.id,
                    g.utterances,
                    g.mean_ctc,
                    g.token_error_rate,
                    ent.join(" ")
                );
            }
        }
        s
    }
}
