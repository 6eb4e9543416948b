//! FLOP accounting.
//!
//! Convention: one multiply-add is 2 FLOPs, each `exp` or `ln` inside a
//! softmax/log-softmax is 1 FLOP. Bias adds, activations, residual adds and
//! pooling sums are not counted.
//!
//! Two independent routes exist. The runtime trace counter below is fed by
//! the tensor primitives while a [`trace`] scope is active. The analytic
//! [`count_flops`] walks a [`ModelConfig`] and never touches the layers.

use std::cell::Cell;

use crate::config::{ModelConfig, RouterVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlopCategory {
    Expert,
    Router,
    Other,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopTally {
    pub expert: u64,
    pub router: u64,
    pub other: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.expert + self.router + self.other
    }

    fn add(&mut self, cat: FlopCategory, n: u64) {
        match cat {
            FlopCategory::Expert => self.expert += n,
            FlopCategory::Router => self.router += n,
            FlopCategory::Other => self.other += n,
        }
    }
}

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static CATEGORY: Cell<FlopCategory> = const { Cell::new(FlopCategory::Other) };
    static TALLY: Cell<FlopTally> = Cell::new(FlopTally::default());
}

fn bump(flops: u64) {
    if ACTIVE.with(Cell::get) {
        let cat = CATEGORY.with(Cell::get);
        TALLY.with(|t| {
            let mut v = t.get();
            v.add(cat, flops);
            t.set(v);
        });
    }
}

/// Records `n` multiply-adds against the current category.
#[inline]
pub fn record_macs(n: usize) {
    bump(2 * n as u64);
}

/// Records `n` exp/ln evaluations against the current category.
#[inline]
pub fn record_transcendental(n: usize) {
    bump(n as u64);
}

/// Runs `f` with FLOPs attributed to `cat`.
pub fn with_category<R>(cat: FlopCategory, f: impl FnOnce() -> R) -> R {
    let prev = CATEGORY.with(|c| c.replace(cat));
    let out = f();
    CATEGORY.with(|c| c.set(prev));
    out
}

/// Runs `f` with tracing enabled on this thread and returns the tally it produced.
pub fn trace<R>(f: impl FnOnce() -> R) -> (R, FlopTally) {
    let was_active = ACTIVE.with(|a| a.replace(true));
    let saved = TALLY.with(|t| t.replace(FlopTally::default()));
    let out = f();
    let tally = TALLY.with(|t| t.replace(saved));
    ACTIVE.with(|a| a.set(was_active));
    if was_active {
        TALLY.with(|t| {
            let mut v = t.get();
            v.expert += tally.expert;
            v.router += tally.router;
            v.other += tally.other;
            t.set(v);
        });
    }
    (out, tally)
}

/// Analytic FLOPs for inference on a one-second input (`frames_per_second` frames).
///
/// Only one expert per MoE layer is charged per frame regardless of
/// `n_experts`; the router term is the only part that grows with the expert count.
pub fn count_flops(cfg: &ModelConfig) -> FlopTally {
    let t = cfg.frames_per_second as u64;
    let mut tally = FlopTally::default();
    if t == 0 {
        return tally;
    }
    let mac = |n: u64| 2 * n;
    let d_feat = cfg.d_feat as u64;
    let d_c = cfg.d_c as u64;
    let d = cfg.d_model as u64;
    let vocab_out = cfg.vocab as u64 + 1;
    let taps = 2 * cfg.memory_order as u64 + 1;

    // embedding network
    let mut other = mac(t * d_feat * d_c);
    other += cfg.embed_memory_layers as u64 * mac(t * taps * d_c);
    other += mac(t * d_c * vocab_out);
    if cfg.router == RouterVariant::Moe2 {
        let (d_a, d_d) = (cfg.d_a as u64, cfg.d_d as u64);
        other += mac(d_c * d_a) + mac(d_a * cfg.n_accents as u64);
        other += mac(d_c * d_d) + mac(d_d * cfg.n_domains as u64);
    }

    // backbone
    other += mac(t * d_feat * d);
    let layers = cfg.n_moe_layers as u64;
    other += layers * mac(t * taps * d);
    let n_att = cfg.attention_layers() as u64;
    let d_att = cfg.d_att as u64;
    let attention = mac(3 * t * d * d_att) + mac(t * t * d_att) + t * t + mac(t * t * d_att) + mac(t * d_att * d);
    other += n_att * attention;
    other += mac(t * d * vocab_out) + t * (vocab_out + 1);

    tally.other = other;
    tally.expert = layers * t * mac(d * cfg.expert_hidden as u64 + cfg.expert_hidden as u64 * d);
    let n = cfg.n_experts as u64;
    tally.router = layers * t * (mac(cfg.route_dim() as u64 * n) + n);
    tally
}
