//! Flat `key = value` configuration files.
//!
//! Lines are UTF-8, `#` starts a comment, blank lines are ignored and unknown
//! keys are rejected. Keys prefixed with `data.` configure the synthetic
//! corpus; the shared dimensions (`vocab`, `d_feat`, `n_domains`,
//! `n_accents`) apply to both the model and the corpus.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouterVariant {
    /// Router sees the grapheme embedding and the previous layer output.
    Moe1,
    /// Router additionally sees the accent and domain embeddings.
    Moe2,
}

impl FromStr for RouterVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moe1" => Ok(RouterVariant::Moe1),
            "moe2" => Ok(RouterVariant::Moe2),
            _ => Err(Error::Config(format!("router: expected moe1 or moe2, got {s:?}"))),
        }
    }
}

impl RouterVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            RouterVariant::Moe1 => "moe1",
            RouterVariant::Moe2 => "moe2",
        }
    }
}

/// Where the sparsity and importance losses are evaluated in a multi-worker step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxScope {
    /// On the router probabilities gathered from every worker.
    Global,
    /// On each worker's own probabilities, then averaged over workers.
    PerWorker,
}

impl FromStr for AuxScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(AuxScope::Global),
            "per_worker" => Ok(AuxScope::PerWorker),
            _ => Err(Error::Config(format!(
                "aux_scope: expected global or per_worker, got {s:?}"
            ))),
        }
    }
}

impl AuxScope {
    pub fn as_str(self) -> &'static str {
        match self {
            AuxScope::Global => "global",
            AuxScope::PerWorker => "per_worker",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_moe_layers: usize,
    pub n_memory_layers: usize,
    /// An attention layer follows every this many MoE/memory pairs; 0 disables attention.
    pub attention_every: usize,
    pub n_experts: usize,
    pub d_feat: usize,
    pub d_model: usize,
    pub expert_hidden: usize,
    pub memory_order: usize,
    pub d_att: usize,
    pub d_c: usize,
    pub d_a: usize,
    pub d_d: usize,
    pub embed_memory_layers: usize,
    pub router: RouterVariant,
    pub vocab: usize,
    pub n_domains: usize,
    pub n_accents: usize,
    pub weights: LossWeights,
    /// Stop router gradients from reaching the embedding network.
    pub detach_embedding: bool,
    pub aux_scope: AuxScope,
    pub n_workers: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub frames_per_second: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_moe_layers: 6,
            n_memory_layers: 6,
            attention_every: 3,
            n_experts: 2,
            d_feat: 24,
            d_model: 32,
            expert_hidden: 64,
            memory_order: 2,
            d_att: 32,
            d_c: 32,
            d_a: 16,
            d_d: 16,
            embed_memory_layers: 2,
            router: RouterVariant::Moe2,
            vocab: 8,
            n_domains: 6,
            n_accents: 4,
            weights: LossWeights::default(),
            detach_embedding: false,
            aux_scope: AuxScope::Global,
            n_workers: 1,
            seed: 1,
            learning_rate: 0.002,
            clip_norm: 5.0,
            batch_size: 16,
            steps: 300,
            frames_per_second: 33,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl ModelConfig {
    /// Width of the concatenated router input.
    pub fn route_dim(&self) -> usize {
        match self.router {
            RouterVariant::Moe1 => self.d_c + self.d_model,
            RouterVariant::Moe2 => self.d_c + self.d_a + self.d_d + self.d_model,
        }
    }

    pub fn attention_layers(&self) -> usize {
        if self.attention_every == 0 {
            0
        } else {
            self.n_moe_layers / self.attention_every
        }
    }

    pub fn has_task_heads(&self) -> bool {
        self.router == RouterVariant::Moe2
    }

    /// Loss weights with the accent/domain terms removed for the baseline variant.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.has_task_heads() {
            w.eta = 0.0;
            w.theta = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_experts", self.n_experts),
            ("d_feat", self.d_feat),
            ("d_model", self.d_model),
            ("expert_hidden", self.expert_hidden),
            ("d_c", self.d_c),
            ("vocab", self.vocab),
            ("n_domains", self.n_domains),
            ("n_accents", self.n_accents),
            ("n_workers", self.n_workers),
            ("batch_size", self.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if self.n_memory_layers != self.n_moe_layers {
            return Err(Error::Config(format!(
                "n_memory_layers ({}) must equal n_moe_layers ({}): each MoE layer is followed by one memory layer",
                self.n_memory_layers, self.n_moe_layers
            )));
        }
        if self.attention_every > 0 && self.d_att == 0 {
            return Err(Error::Config("d_att must be positive when attention is enabled".into()));
        }
        if self.router == RouterVariant::Moe2 && (self.d_a == 0 || self.d_d == 0) {
            return Err(Error::Config("d_a and d_d must be positive for router = moe2".into()));
        }
        if self.n_workers > self.batch_size {
            return Err(Error::Config(format!(
                "n_workers ({}) exceeds batch_size ({})",
                self.n_workers, self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be a finite non-negative number".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        self.weights.validate()
    }

    /// Applies one key; returns `Ok(false)` when the key is not a model key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_moe_layers" => self.n_moe_layers = parse(key, value)?,
            "n_memory_layers" => self.n_memory_layers = parse(key, value)?,
            "attention_every" => self.attention_every = parse(key, value)?,
            "n_experts" => self.n_experts = parse(key, value)?,
            "d_feat" => self.d_feat = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "expert_hidden" => self.expert_hidden = parse(key, value)?,
            "memory_order" => self.memory_order = parse(key, value)?,
            "d_att" => self.d_att = parse(key, value)?,
            "d_c" => self.d_c = parse(key, value)?,
            "d_a" => self.d_a = parse(key, value)?,
            "d_d" => self.d_d = parse(key, value)?,
            "embed_memory_layers" => self.embed_memory_layers = parse(key, value)?,
            "router" => self.router = value.parse()?,
            "vocab" => self.vocab = parse(key, value)?,
            "n_domains" => self.n_domains = parse(key, value)?,
            "n_accents" => self.n_accents = parse(key, value)?,
            "alpha" => self.weights.alpha = parse(key, value)?,
            "beta" => self.weights.beta = parse(key, value)?,
            "gamma" => self.weights.gamma = parse(key, value)?,
            "eta" => self.weights.eta = parse(key, value)?,
            "theta" => self.weights.theta = parse(key, value)?,
            "detach_embedding" => self.detach_embedding = parse_bool(key, value)?,
            "aux_scope" => self.aux_scope = value.parse()?,
            "n_workers" => self.n_workers = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "frames_per_second" => self.frames_per_second = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Serializes every key in a fixed order; parsing the result yields an equal config.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        let lines: Vec<(&str, String)> = vec![
            ("n_moe_layers", self.n_moe_layers.to_string()),
            ("n_memory_layers", self.n_memory_layers.to_string()),
            ("attention_every", self.attention_every.to_string()),
            ("n_experts", self.n_experts.to_string()),
            ("d_feat", self.d_feat.to_string()),
            ("d_model", self.d_model.to_string()),
            ("expert_hidden", self.expert_hidden.to_string()),
            ("memory_order", self.memory_order.to_string()),
            ("d_att", self.d_att.to_string()),
            ("d_c", self.d_c.to_string()),
            ("d_a", self.d_a.to_string()),
            ("d_d", self.d_d.to_string()),
            ("embed_memory_layers", self.embed_memory_layers.to_string()),
            ("router", self.router.as_str().to_string()),
            ("vocab", self.vocab.to_string()),
            ("n_domains", self.n_domains.to_string()),
            ("n_accents", self.n_accents.to_string()),
            ("alpha", w.alpha.to_string()),
            ("beta", w.beta.to_string()),
            ("gamma", w.gamma.to_string()),
            ("eta", w.eta.to_string()),
            ("theta", w.theta.to_string()),
            ("detach_embedding", self.detach_embedding.to_string()),
            ("aux_scope", self.aux_scope.as_str().to_string()),
            ("n_workers", self.n_workers.to_string()),
            ("seed", self.seed.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("frames_per_second", self.frames_per_second.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (line_no, key, value) in kv_lines(text)? {
            if !cfg.apply(key, value)? {
                return Err(Error::Config(format!("line {line_no}: unknown key {key:?}")));
            }
        }
        Ok(cfg)
    }
}

/// Splits a config text into `(line number, key, value)` triples.
pub fn kv_lines(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

/// A full run configuration: model, training and corpus keys from one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.synth.align_with(&cfg.model);
        for (line_no, key, value) in kv_lines(text)? {
            let handled = if let Some(data_key) = key.strip_prefix("data.") {
                cfg.synth.apply(data_key, value)?
            } else {
                cfg.model.apply(key, value)?
            };
            if !handled {
                return Err(Error::Config(format!("line {line_no}: unknown key {key:?}")));
            }
        }
        cfg.synth.align_with(&cfg.model);
        cfg.model.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::default();
        cfg.learning_rate = 0.1 + 0.2;
        cfg.router = RouterVariant::Moe1;
        cfg.aux_scope = AuxScope::PerWorker;
        let back = ModelConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_comments() {
        let err = RunConfig::parse("n_experts = 4\nn_expert = 4\n").unwrap_err();
        assert!(err.to_string().contains("n_expert"), "{err}");
        let cfg = RunConfig::parse("# comment\n\nn_experts = 4 # trailing\ndata.noise = 0.25\n").unwrap();
        assert_eq!(cfg.model.n_experts, 4);
        assert_eq!(cfg.synth.noise, 0.25);
        assert!(RunConfig::parse("data.bogus = 1").is_err());
        assert!(RunConfig::parse("router = moe3").is_err());
    }

    #[test]
    fn shared_dims_reach_the_corpus() {
        let cfg = RunConfig::parse("vocab = 5\nd_feat = 10\nn_domains = 4\n").unwrap();
        assert_eq!(cfg.synth.vocab, 5);
        assert_eq!(cfg.synth.d_feat, 10);
        assert_eq!(cfg.synth.n_domains, 4);
    }

    #[test]
    fn validation_names_the_key() {
        let mut cfg = ModelConfig::default();
        cfg.d_a = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("d_a"));
        cfg.router = RouterVariant::Moe1;
        cfg.validate().unwrap();
        cfg.n_memory_layers = 3;
        assert!(cfg.validate().unwrap_err().to_string().contains("n_memory_layers"));
    }

    #[test]
    fn attention_counts() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.attention_layers(), 2);
        let deep = ModelConfig {
            n_moe_layers: 30,
            n_memory_layers: 30,
            attention_every: 10,
            ..ModelConfig::default()
        };
        assert_eq!(deep.attention_layers(), 3);
    }
}
