//! Full acoustic model: embedding network plus a stack of MoE, memory and
//! attention layers with a CTC output head.
//!
//! [`Model::loss_and_grads`] is the plain single-process training step. The
//! expert-parallel runtime in [`crate::parallel`] must agree with it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, RouterVariant};
use crate::data::Utterance;
use crate::embedding::{EmbedCache, EmbedUpstream, EmbeddingNetwork, EmbeddingOutputs};
use crate::error::{dim_err, Error, Result};
use crate::layers::{
    join, AttentionCache, AttentionLayer, Linear, MemoryLayer, MoeCache, MoeLayer, Parameters, RouterContext,
};
use crate::losses::{self, combine, LossBreakdown, LossParts, LossWeights, RouterBatch};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar = f64> {
    pub config: ModelConfig,
    pub embedding: EmbeddingNetwork<S>,
    /// Frame projection `d_feat → d_model` into the backbone.
    pub input: Linear<S>,
    pub moe: Vec<MoeLayer<S>>,
    pub memory: Vec<MemoryLayer<S>>,
    pub attention: Vec<AttentionLayer<S>>,
    pub output: Linear<S>,
}

/// Assembles a freshly initialized model; the RNG is seeded from `config.seed`.
pub fn build_model<S: Scalar>(config: &ModelConfig) -> Result<Model<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let heads = config
        .has_task_heads()
        .then_some((config.d_a, config.n_accents, config.d_d, config.n_domains));
    let embedding = EmbeddingNetwork::init(
        &mut rng,
        config.d_feat,
        config.d_c,
        config.embed_memory_layers,
        config.memory_order,
        config.vocab,
        heads,
    );
    let input = Linear::init(&mut rng, config.d_feat, config.d_model, true);
    let mut moe = Vec::with_capacity(config.n_moe_layers);
    let mut memory = Vec::with_capacity(config.n_moe_layers);
    let mut attention = Vec::with_capacity(config.attention_layers());
    for l in 0..config.n_moe_layers {
        moe.push(MoeLayer::init(
            &mut rng,
            l,
            config.route_dim(),
            config.d_model,
            config.expert_hidden,
            config.n_experts,
            config.router,
        ));
        memory.push(MemoryLayer::identity(config.memory_order, config.d_model));
        if attention_slot(config, l).is_some() {
            attention.push(AttentionLayer::init(&mut rng, config.d_model, config.d_att));
        }
    }
    let output = Linear::init(&mut rng, config.d_model, config.vocab + 1, true);
    Ok(Model {
        config: config.clone(),
        embedding,
        input,
        moe,
        memory,
        attention,
        output,
    })
}

/// Index of the attention layer that follows MoE/memory pair `l`, if any.
pub fn attention_slot(config: &ModelConfig, l: usize) -> Option<usize> {
    let every = config.attention_every;
    (every > 0 && (l + 1) % every == 0 && (l + 1) / every <= config.attention_layers()).then(|| (l + 1) / every - 1)
}

/// Per-layer state of one utterance's forward pass.
#[derive(Clone, Debug)]
pub(crate) struct LayerState<S: Scalar> {
    /// Absent when the experts ran elsewhere (expert-parallel runtime).
    pub moe: Option<MoeCache<S>>,
    pub probs: Tensor<S>,
    pub selected: Vec<usize>,
    pub memory_input: Tensor<S>,
    pub attention: Option<AttentionCache<S>>,
}

/// Result of running one utterance through the model.
#[derive(Clone, Debug)]
pub struct Forward<S: Scalar = f64> {
    pub log_probs: Tensor<S>,
    pub embeddings: EmbeddingOutputs<S>,
    pub(crate) embed_cache: EmbedCache<S>,
    pub(crate) frames: Tensor<S>,
    pub(crate) layers: Vec<LayerState<S>>,
    pub(crate) head_input: Tensor<S>,
}

impl<S: Scalar> Forward<S> {
    /// Router distribution (`T×n`) at MoE layer `l`.
    pub fn router_probs(&self, l: usize) -> &Tensor<S> {
        &self.layers[l].probs
    }

    /// Selected expert per frame at MoE layer `l`.
    pub fn selected(&self, l: usize) -> &[usize] {
        &self.layers[l].selected
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Loss values and output-side gradients for one utterance, already scaled by `1/B`
/// and the loss weights.
pub(crate) struct UttTerms<S: Scalar> {
    pub l_c: f64,
    pub l_e: f64,
    pub l_a: f64,
    pub l_d: f64,
    /// Gradient on the backbone's output logits.
    pub d_logits: Tensor<S>,
    pub d_grapheme: Option<Tensor<S>>,
    pub d_accent: Option<Tensor<S>>,
    pub d_domain: Option<Tensor<S>>,
}

/// Output-side loss terms of one utterance in a batch of `batch` utterances.
pub(crate) fn utterance_terms<S: Scalar>(
    fwd: &Forward<S>,
    utt: &Utterance,
    weights: &LossWeights,
    batch: usize,
) -> Result<UttTerms<S>> {
    let inv_b = S::lit(1.0 / batch as f64);
    let ctc = losses::ctc_loss(&fwd.log_probs, &utt.labels)?;
    let d_logits = tensor::log_softmax_backward(&fwd.log_probs, &ctc.grad.scale(inv_b))?;
    let emb = losses::ctc_loss_from_logits(&fwd.embeddings.grapheme_logits, &utt.labels)?;
    let d_grapheme = (weights.gamma != 0.0).then(|| emb.grad.scale(inv_b * S::lit(weights.gamma)));
    let mut out = UttTerms {
        l_c: ctc.loss.as_f64(),
        l_e: emb.loss.as_f64(),
        l_a: 0.0,
        l_d: 0.0,
        d_logits,
        d_grapheme,
        d_accent: None,
        d_domain: None,
    };
    if let Some(logits) = &fwd.embeddings.accent_logits {
        let (l, g) = losses::cross_entropy(logits, utt.accent_id)?;
        out.l_a = l.as_f64();
        out.d_accent = (weights.eta != 0.0).then(|| g.scale(inv_b * S::lit(weights.eta)));
    }
    if let Some(logits) = &fwd.embeddings.domain_logits {
        let (l, g) = losses::cross_entropy(logits, utt.domain_id)?;
        out.l_d = l.as_f64();
        out.d_domain = (weights.theta != 0.0).then(|| g.scale(inv_b * S::lit(weights.theta)));
    }
    Ok(out)
}

/// Sparsity and importance losses averaged over layers, with their weighted
/// gradients on each layer's probabilities.
pub(crate) fn router_terms<S: Scalar>(
    batches: &[RouterBatch<S>],
    weights: &LossWeights,
) -> Result<(f64, f64, Vec<Tensor<S>>)> {
    let n_layers = batches.len();
    if n_layers == 0 {
        return Ok((0.0, 0.0, Vec::new()));
    }
    let inv_l = 1.0 / n_layers as f64;
    let (ws, wm) = (S::lit(weights.alpha * inv_l), S::lit(weights.beta * inv_l));
    let (mut l_s, mut l_m) = (0.0, 0.0);
    let mut grads = Vec::with_capacity(n_layers);
    for b in batches {
        let (s, gs) = losses::sparsity_loss(b)?;
        let (m, gm) = losses::mean_importance_loss(b)?;
        l_s += s.as_f64();
        l_m += m.as_f64();
        let mut g = gs.scale(ws);
        g.axpy(wm, &gm)?;
        grads.push(g);
    }
    Ok((l_s * inv_l, l_m * inv_l, grads))
}

/// Checks that an utterance fits the model's dimensions.
pub fn check_utterance(config: &ModelConfig, utt: &Utterance) -> Result<()> {
    if utt.frames.rank() != 2 || utt.frames.cols() != config.d_feat {
        return Err(Error::Config(format!(
            "utterance {} has {:?} frames but d_feat = {}",
            utt.utt_id,
            utt.frames.shape(),
            config.d_feat
        )));
    }
    if let Some(&l) = utt.labels.iter().find(|&&l| l >= config.vocab) {
        return Err(Error::Config(format!(
            "utterance {} has label {l} but vocab = {}",
            utt.utt_id, config.vocab
        )));
    }
    if utt.domain_id >= config.n_domains || utt.accent_id >= config.n_accents {
        return Err(Error::Config(format!(
            "utterance {} has domain {} / accent {} outside n_domains = {} / n_accents = {}",
            utt.utt_id, utt.domain_id, utt.accent_id, config.n_domains, config.n_accents
        )));
    }
    Ok(())
}

impl<S: Scalar> Model<S> {
    pub fn n_layers(&self) -> usize {
        self.moe.len()
    }

    pub fn variant(&self) -> RouterVariant {
        self.config.router
    }

    /// Router context built from the embedding outputs.
    pub(crate) fn context<'a>(&self, emb: &'a EmbeddingOutputs<S>) -> RouterContext<'a, S> {
        RouterContext {
            e_c: &emb.e_c,
            e_a: emb.e_a.as_ref().map(|t| t.data()),
            e_d: emb.e_d.as_ref().map(|t| t.data()),
        }
    }

    /// Residual, memory and (where scheduled) attention after MoE layer `l`.
    pub(crate) fn post_moe(
        &self,
        l: usize,
        h: &Tensor<S>,
        y: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>, Option<AttentionCache<S>>)> {
        let memory_input = h.add(y)?;
        let mut out = self.memory[l].forward(&memory_input)?;
        let mut att_cache = None;
        if let Some(a) = attention_slot(&self.config, l) {
            let (o, c) = self.attention[a].forward(&out)?;
            out = o;
            att_cache = Some(c);
        }
        Ok((out, memory_input, att_cache))
    }

    /// Backward of [`Model::post_moe`] down to the MoE output, which equals the gradient on its input via the residual.
    pub(crate) fn post_moe_backward(
        &self,
        l: usize,
        state: &LayerState<S>,
        dh: &Tensor<S>,
        grads: &mut Model<S>,
    ) -> Result<Tensor<S>> {
        let mut g = dh.clone();
        if let (Some(a), Some(cache)) = (attention_slot(&self.config, l), &state.attention) {
            g = self.attention[a].backward(cache, &g, &mut grads.attention[a])?;
        }
        self.memory[l].backward(&state.memory_input, &g, &mut grads.memory[l])
    }

    /// Runs one utterance (`T×d_feat`) through the model.
    pub fn forward(&self, frames: &Tensor<S>) -> Result<Forward<S>> {
        if frames.rank() != 2 || frames.cols() != self.config.d_feat {
            return Err(dim_err(format!(
                "model expects T×{} frames, got {:?}",
                self.config.d_feat,
                frames.shape()
            )));
        }
        let (embeddings, embed_cache) = self.embedding.embed(frames)?;
        let mut h = self.input.forward(frames)?;
        let mut layers = Vec::with_capacity(self.moe.len());
        {
            let ctx = self.context(&embeddings);
            for (l, moe) in self.moe.iter().enumerate() {
                let (y, decisions, cache) = moe.forward(&h, &ctx)?;
                let (next, memory_input, attention) = self.post_moe(l, &h, &y)?;
                let rows: Vec<Vec<S>> = decisions.iter().map(|d| d.probs.data().to_vec()).collect();
                layers.push(LayerState {
                    moe: Some(cache),
                    probs: Tensor::from_rows(&rows)?,
                    selected: decisions.iter().map(|d| d.selected).collect(),
                    memory_input,
                    attention,
                });
                h = next;
            }
        }
        let logits = self.output.forward(&h)?;
        let log_probs = tensor::log_softmax(&logits)?;
        Ok(Forward {
            log_probs,
            embeddings,
            embed_cache,
            frames: frames.clone(),
            layers,
            head_input: h,
        })
    }

    /// Output log-probabilities only.
    pub fn infer(&self, frames: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward(frames)?.log_probs)
    }

    /// Embedding-network backward shared by both training paths.
    pub(crate) fn embedding_backward(
        &self,
        fwd: &Forward<S>,
        terms: &UttTerms<S>,
        d_ec: Tensor<S>,
        d_ea: Option<Tensor<S>>,
        d_ed: Option<Tensor<S>>,
        grads: &mut Model<S>,
    ) -> Result<()> {
        let detach = self.config.detach_embedding;
        let up = EmbedUpstream {
            e_c: (!detach).then_some(d_ec),
            e_a: if detach { None } else { d_ea },
            e_d: if detach { None } else { d_ed },
            grapheme_logits: terms.d_grapheme.clone(),
            accent_logits: terms.d_accent.clone(),
            domain_logits: terms.d_domain.clone(),
        };
        self.embedding.backward(&fwd.embed_cache, &up, &mut grads.embedding)?;
        Ok(())
    }

    /// One plain training step on a batch: loss breakdown and parameter gradients.
    ///
    /// Per-utterance terms are averaged over the batch. The router
    /// regularizers see every frame of the batch at once and are averaged over layers.
    pub fn loss_and_grads(&self, batch: &[&Utterance]) -> Result<(LossBreakdown, Model<S>)> {
        if batch.is_empty() {
            return Err(Error::EmptySequence("training batch is empty".into()));
        }
        let weights = self.config.effective_weights();
        let mut fwds = Vec::with_capacity(batch.len());
        for utt in batch {
            check_utterance(&self.config, utt)?;
            fwds.push(self.forward(&utt.frames.cast::<S>())?);
        }
        let mut router_batches = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            let parts: Vec<&Tensor<S>> = fwds.iter().map(|f| f.router_probs(l)).collect();
            router_batches.push(RouterBatch::new(tensor::concat(&parts, 0)?)?);
        }
        let (l_s, l_m, dprobs) = router_terms(&router_batches, &weights)?;

        let mut grads = self.zeroed();
        let mut parts = LossParts {
            l_s,
            l_m,
            ..LossParts::default()
        };
        let mut offset = 0;
        for (fwd, utt) in fwds.iter().zip(batch) {
            let terms = utterance_terms(fwd, utt, &weights, batch.len())?;
            parts.l_c += terms.l_c;
            parts.l_e += terms.l_e;
            parts.l_a += terms.l_a;
            parts.l_d += terms.l_d;
            let t_len = fwd.log_probs.rows();
            let mut dh = self.output.backward(&fwd.head_input, &terms.d_logits, &mut grads.output)?;
            let mut d_ec = fwd.embeddings.e_c.zeros_like();
            let mut d_ea = fwd.embeddings.e_a.as_ref().map(Tensor::zeros_like);
            let mut d_ed = fwd.embeddings.e_d.as_ref().map(Tensor::zeros_like);
            for l in (0..self.n_layers()).rev() {
                let state = &fwd.layers[l];
                let dy = self.post_moe_backward(l, state, &dh, &mut grads)?;
                let dp = dprobs[l].narrow(0, offset, t_len)?;
                let cache = state
                    .moe
                    .as_ref()
                    .ok_or_else(|| Error::State(format!("no MoE cache for layer {l}")))?;
                let mg = self.moe[l].backward(cache, &dy, Some(&dp), &mut grads.moe[l])?;
                dh = dy;
                dh.add_assign(&mg.input)?;
                d_ec.add_assign(&mg.e_c)?;
                if let (Some(acc), Some(g)) = (&mut d_ea, &mg.e_a) {
                    acc.add_assign(g)?;
                }
                if let (Some(acc), Some(g)) = (&mut d_ed, &mg.e_d) {
                    acc.add_assign(g)?;
                }
            }
            self.input.backward_params(&fwd.frames, &dh, &mut grads.input)?;
            self.embedding_backward(fwd, &terms, d_ec, d_ea, d_ed, &mut grads)?;
            offset += t_len;
        }
        let inv_b = 1.0 / batch.len() as f64;
        parts.l_c *= inv_b;
        parts.l_e *= inv_b;
        parts.l_a *= inv_b;
        parts.l_d *= inv_b;
        let loss = combine(&parts, &weights)?;
        Ok((loss, grads))
    }

    /// Parameters belonging to experts, as opposed to replicated ones.
    pub fn expert_param_count(&self) -> usize {
        self.moe
            .iter()
            .flat_map(|m| &m.experts)
            .map(|e| e.param_count())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.all_finite());
        ok
    }

    /// Squared L2 norm over every parameter.
    pub fn norm_sq(&self) -> f64 {
        let mut s = 0.0;
        self.visit("", &mut |_, t| s += t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>());
        s
    }

    /// `self += alpha · other`, parameter by parameter.
    pub fn axpy(&mut self, alpha: S, other: &Model<S>) -> Result<()> {
        let mut src = Vec::new();
        other.visit("", &mut |_, t| src.push(t));
        let mut it = src.into_iter();
        let mut res = Ok(());
        self.visit_mut("", &mut |name, t| {
            if res.is_err() {
                return;
            }
            res = match it.next() {
                Some(o) => t.axpy(alpha, o),
                None => Err(Error::State(format!("parameter {name} missing from the other model"))),
            };
        });
        res
    }

    pub fn scale_in_place(&mut self, s: S) {
        self.visit_mut("", &mut |_, t| t.scale_in_place(s));
    }

    /// Same architecture and parameters in another element type.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let mut out = build_model::<T>(&self.config).expect("config was validated when built");
        let mut src = Vec::new();
        self.visit("", &mut |_, t| src.push(t.cast::<T>()));
        let mut it = src.into_iter();
        out.visit_mut("", &mut |_, t| *t = it.next().expect("same architecture"));
        out
    }
}

impl<S: Scalar> Parameters<S> for Model<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.embedding.visit(&join(prefix, "embedding"), f);
        self.input.visit(&join(prefix, "input"), f);
        for (l, m) in self.moe.iter().enumerate() {
            m.visit(&join(prefix, &format!("moe{l}")), f);
            self.memory[l].visit(&join(prefix, &format!("memory{l}")), f);
        }
        for (a, att) in self.attention.iter().enumerate() {
            att.visit(&join(prefix, &format!("attention{a}")), f);
        }
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.embedding.visit_mut(&join(prefix, "embedding"), f);
        self.input.visit_mut(&join(prefix, "input"), f);
        for (l, m) in self.moe.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &format!("moe{l}")), f);
            self.memory[l].visit_mut(&join(prefix, &format!("memory{l}")), f);
        }
        for (a, att) in self.attention.iter_mut().enumerate() {
            att.visit_mut(&join(prefix, &format!("attention{a}")), f);
        }
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use crate::flops::{count_flops, trace};
    use crate::gradcheck::check_params;

    pub(crate) fn tiny(variant: RouterVariant, seed: u64) -> ModelConfig {
        ModelConfig {
            n_moe_layers: 2,
            n_memory_layers: 2,
            attention_every: 2,
            n_experts: 3,
            d_feat: 5,
            d_model: 6,
            expert_hidden: 7,
            memory_order: 1,
            d_att: 4,
            d_c: 5,
            d_a: 3,
            d_d: 2,
            embed_memory_layers: 1,
            router: variant,
            vocab: 3,
            n_domains: 2,
            n_accents: 2,
            seed,
            batch_size: 3,
            ..ModelConfig::default()
        }
    }

    fn corpus(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Utterance> {
        let mut s = SynthConfig {
            t_min: 5,
            t_max: 8,
            max_labels: 2,
            seed,
            ..SynthConfig::default()
        };
        s.align_with(cfg);
        generate(&s, n).unwrap()
    }

    #[test]
    fn desk_default_stack_shape() {
        let m: Model = build_model(&ModelConfig::default()).unwrap();
        assert_eq!(m.moe.len(), 6);
        assert_eq!(m.memory.len(), 6);
        assert_eq!(m.attention.len(), 2);
    }

    #[test]
    fn thirty_layer_stack_has_three_attention_layers() {
        let cfg = ModelConfig {
            n_moe_layers: 30,
            n_memory_layers: 30,
            attention_every: 10,
            ..ModelConfig::default()
        };
        let slots: Vec<usize> = (0..30).filter_map(|l| attention_slot(&cfg, l)).collect();
        assert_eq!(slots, vec![0, 1, 2]);
    }

    #[test]
    fn doubling_experts_doubles_expert_params_only() {
        let two: Model = build_model(&ModelConfig::default()).unwrap();
        let cfg4 = ModelConfig {
            n_experts: 4,
            ..ModelConfig::default()
        };
        let four: Model = build_model(&cfg4).unwrap();
        assert_eq!(four.expert_param_count(), 2 * two.expert_param_count());
        let d_route = cfg4.route_dim();
        let non_expert = |m: &Model| m.param_count() - m.expert_param_count();
        assert_eq!(non_expert(&four) - non_expert(&two), 6 * 2 * d_route);
    }

    #[test]
    fn runtime_trace_matches_analytic_count() {
        for variant in [RouterVariant::Moe1, RouterVariant::Moe2] {
            for n in [1, 2, 5] {
                let cfg = ModelConfig {
                    router: variant,
                    n_experts: n,
                    ..tiny(variant, 3)
                };
                let m: Model = build_model(&cfg).unwrap();
                let frames = Tensor::filled(&[cfg.frames_per_second, cfg.d_feat], 0.3);
                let (_, tally) = trace(|| m.infer(&frames).unwrap());
                assert_eq!(tally, count_flops(&cfg), "{variant:?} n={n}");
            }
        }
    }

    #[test]
    fn bad_utterance_is_a_config_error() {
        let cfg = tiny(RouterVariant::Moe2, 1);
        let m: Model = build_model(&cfg).unwrap();
        let mut u = corpus(&cfg, 1, 1).remove(0);
        u.domain_id = 9;
        assert!(matches!(m.loss_and_grads(&[&u]), Err(Error::Config(_))));
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        for seed in 0..5 {
            for variant in [RouterVariant::Moe1, RouterVariant::Moe2] {
                let mut cfg = tiny(variant, seed);
                cfg.weights = LossWeights {
                    alpha: 0.3,
                    beta: 0.4,
                    gamma: 0.5,
                    eta: 0.6,
                    theta: 0.7,
                };
                let m: Model = build_model(&cfg).unwrap();
                let data = corpus(&cfg, 3, seed + 100);
                let batch: Vec<&Utterance> = data.iter().collect();
                let (_, grads) = m.loss_and_grads(&batch).unwrap();
                let report = check_params(&m, &grads, 1e-5, 6, |p| p.loss_and_grads(&batch).unwrap().0.total);
                for r in &report {
                    assert!(r.passes(1e-4), "seed {seed} {variant:?} {}: {}", r.name, r.max_rel_err);
                }
            }
        }
    }

    #[test]
    fn detached_embedding_only_learns_from_its_own_losses() {
        let mut cfg = tiny(RouterVariant::Moe2, 4);
        cfg.detach_embedding = true;
        cfg.weights = LossWeights::zero();
        let m: Model = build_model(&cfg).unwrap();
        let data = corpus(&cfg, 2, 9);
        let batch: Vec<&Utterance> = data.iter().collect();
        let (_, g) = m.loss_and_grads(&batch).unwrap();
        assert_eq!(g.embedding.norm(), 0.0);
        cfg.detach_embedding = false;
        let m: Model = build_model(&cfg).unwrap();
        let (_, g) = m.loss_and_grads(&batch).unwrap();
        assert!(g.embedding.norm() > 0.0);
    }

    trait Norm {
        fn norm(&self) -> f64;
    }

    impl Norm for EmbeddingNetwork<f64> {
        fn norm(&self) -> f64 {
            let mut s = 0.0;
            self.visit("", &mut |_, t| s += t.data().iter().map(|v| v * v).sum::<f64>());
            s.sqrt()
        }
    }

    #[test]
    fn f32_model_tracks_f64() {
        let cfg = tiny(RouterVariant::Moe2, 2);
        let m64: Model<f64> = build_model(&cfg).unwrap();
        let m32: Model<f32> = m64.cast();
        let data = corpus(&cfg, 2, 3);
        let batch: Vec<&Utterance> = data.iter().collect();
        let (l64, _) = m64.loss_and_grads(&batch).unwrap();
        let (l32, _) = m32.loss_and_grads(&batch).unwrap();
        assert!((l64.total - l32.total).abs() < 1e-3 * l64.total.abs().max(1.0));
    }
}
