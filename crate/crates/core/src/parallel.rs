//! Deterministic simulation of expert parallelism.
//!
//! Experts are partitioned across simulated workers while the embedding
//! network, routers and all non-expert layers are replicated. Each worker owns
//! a contiguous slice of the batch. Per MoE layer the schedule is:
//! route-all, exchange-all, compute-all, return-all. The backward pass
//! mirrors it, and replicated gradients are reduced in ascending worker id.
//!
//! Router probabilities are gathered across workers before the sparsity and
//! importance losses are taken, so they see the whole batch.

use std::ops::Range;

use crate::config::AuxScope;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::layers::{gate_grads, gate_outputs, ExpertCache, Parameters, RouterDecision};
use crate::losses::{combine, LossBreakdown, LossParts, RouterBatch};
use crate::model::{check_utterance, router_terms, utterance_terms, Forward, LayerState, Model};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Contiguous ranges covering `0..n_items`, sizes differing by at most one,
/// lower workers taking the remainder.
pub fn partition_experts(n_experts: usize, n_workers: usize) -> Result<Vec<Range<usize>>> {
    if n_workers == 0 {
        return Err(Error::Config("n_workers must be at least 1".into()));
    }
    let (base, extra) = (n_experts / n_workers, n_experts % n_workers);
    let mut start = 0;
    Ok((0..n_workers)
        .map(|w| {
            let len = base + usize::from(w < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Checks that `ranges` partition `0..n` exactly.
pub fn check_partition(ranges: &[Range<usize>], n: usize) -> Result<()> {
    let mut owner = vec![None; n];
    for (w, r) in ranges.iter().enumerate() {
        for e in r.clone() {
            match owner.get_mut(e) {
                None => return Err(Error::Partition(format!("worker {w} claims expert {e} but only {n} exist"))),
                Some(Some(prev)) => {
                    return Err(Error::Partition(format!("expert {e} owned by workers {prev} and {w}")))
                }
                Some(slot) => *slot = Some(w),
            }
        }
    }
    if let Some(e) = owner.iter().position(Option::is_none) {
        return Err(Error::Partition(format!("expert {e} is not owned by any worker")));
    }
    Ok(())
}

fn owner_of(ranges: &[Range<usize>], expert: usize) -> Result<usize> {
    ranges
        .iter()
        .position(|r| r.contains(&expert))
        .ok_or_else(|| Error::Partition(format!("no worker owns expert {expert}")))
}

/// One frame in flight, tagged with where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<S: Scalar = f64> {
    pub src: usize,
    /// Utterance index local to the source worker.
    pub utt: usize,
    pub frame: usize,
    pub layer: usize,
    pub expert: usize,
    pub payload: Vec<S>,
}

/// Routing of one MoE layer: where every frame goes and how to put it back.
#[derive(Clone, Debug, PartialEq)]
pub struct DispatchPlan {
    pub layer: usize,
    /// Per source worker, per local frame (utterance-major): `(utt, frame, expert)`.
    pub tags: Vec<Vec<(usize, usize, usize)>>,
    /// Destination worker of each entry of `tags`.
    pub dest: Vec<Vec<usize>>,
    ranges: Vec<Range<usize>>,
}

impl DispatchPlan {
    pub fn new(layer: usize, tags: Vec<Vec<(usize, usize, usize)>>, ranges: &[Range<usize>]) -> Result<Self> {
        let dest = tags
            .iter()
            .map(|w| w.iter().map(|&(_, _, e)| owner_of(ranges, e)).collect())
            .collect::<Result<_>>()?;
        Ok(DispatchPlan {
            layer,
            tags,
            dest,
            ranges: ranges.to_vec(),
        })
    }

    pub fn n_workers(&self) -> usize {
        self.ranges.len()
    }

    /// Fills per-destination outboxes and delivers them; returns each worker's inbox
    /// in (source worker, local frame) order.
    pub fn dispatch<S: Scalar>(&self, payloads: &[Vec<Vec<S>>]) -> Result<Vec<Vec<Frame<S>>>> {
        let w = self.n_workers();
        if payloads.len() != w {
            return Err(Error::Transport(format!("{} payload sets for {w} workers", payloads.len())));
        }
        let mut outboxes: Vec<Vec<Vec<Frame<S>>>> = vec![vec![Vec::new(); w]; w];
        for (src, rows) in payloads.iter().enumerate() {
            if rows.len() != self.tags[src].len() {
                return Err(Error::Transport(format!(
                    "worker {src} sends {} frames but routed {}",
                    rows.len(),
                    self.tags[src].len()
                )));
            }
            for (i, row) in rows.iter().enumerate() {
                let (utt, frame, expert) = self.tags[src][i];
                outboxes[src][self.dest[src][i]].push(Frame {
                    src,
                    utt,
                    frame,
                    layer: self.layer,
                    expert,
                    payload: row.clone(),
                });
            }
        }
        Ok(exchange(outboxes))
    }

    /// Sends processed frames back to their sources.
    pub fn give_back<S: Scalar>(&self, processed: Vec<Vec<Frame<S>>>) -> Vec<Vec<Frame<S>>> {
        let w = self.n_workers();
        let mut outboxes: Vec<Vec<Vec<Frame<S>>>> = vec![vec![Vec::new(); w]; w];
        for (owner, frames) in processed.into_iter().enumerate() {
            for f in frames {
                // a corrupt source id is reported as a lost frame by `combine`
                if f.src < w {
                    let src = f.src;
                    outboxes[owner][src].push(f);
                }
            }
        }
        exchange(outboxes)
    }

    /// Restores each source worker's frames to their original order.
    ///
    /// Every routed frame must come back exactly once, from the expert its router selected.
    pub fn combine<S: Scalar>(&self, returned: Vec<Vec<Frame<S>>>) -> Result<Vec<Vec<Vec<S>>>> {
        let mut out = Vec::with_capacity(self.n_workers());
        for (src, frames) in returned.into_iter().enumerate() {
            let tags = &self.tags[src];
            let index: std::collections::HashMap<(usize, usize), usize> =
                tags.iter().enumerate().map(|(i, &(u, t, _))| ((u, t), i)).collect();
            let mut slots: Vec<Option<Vec<S>>> = vec![None; tags.len()];
            for f in frames {
                if f.src != src || f.layer != self.layer {
                    return Err(Error::Transport(format!(
                        "worker {src} received a frame of worker {} layer {}",
                        f.src, f.layer
                    )));
                }
                let i = *index.get(&(f.utt, f.frame)).ok_or_else(|| {
                    Error::Transport(format!("worker {src} received unknown frame {}:{}", f.utt, f.frame))
                })?;
                if f.expert != tags[i].2 {
                    return Err(Error::Transport(format!(
                        "frame {}:{} was processed by expert {} but routed to {}",
                        f.utt, f.frame, f.expert, tags[i].2
                    )));
                }
                if slots[i].replace(f.payload).is_some() {
                    return Err(Error::Transport(format!("frame {}:{} returned twice", f.utt, f.frame)));
                }
            }
            let rows = slots
                .into_iter()
                .enumerate()
                .map(|(i, s)| {
                    s.ok_or_else(|| {
                        Error::Transport(format!("worker {src} lost frame {}:{}", tags[i].0, tags[i].1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(rows);
        }
        Ok(out)
    }
}

/// All-to-all: `outboxes[src][dst]` → `inbox[dst]`, concatenated in source order.
fn exchange<S: Scalar>(outboxes: Vec<Vec<Vec<Frame<S>>>>) -> Vec<Vec<Frame<S>>> {
    let w = outboxes.len();
    let mut inboxes: Vec<Vec<Frame<S>>> = vec![Vec::new(); w];
    for per_dst in outboxes {
        for (dst, frames) in per_dst.into_iter().enumerate() {
            inboxes[dst].extend(frames);
        }
    }
    inboxes
}

/// State of one simulated worker during a step.
#[derive(Clone, Debug)]
pub struct WorkerShard<'a, S: Scalar = f64> {
    pub worker_id: usize,
    pub local_experts: Range<usize>,
    pub local_batch: Vec<&'a Utterance>,
    /// Frames waiting to be sent, per destination worker.
    pub outbox: Vec<Vec<Frame<S>>>,
    pub inbox: Vec<Frame<S>>,
    /// Local router probabilities per MoE layer, filled as routing completes.
    pub router_probs: Vec<Option<RouterBatch<S>>>,
}

/// Splits a batch into contiguous per-worker slices and assigns expert ranges.
pub fn make_shards<'a, S: Scalar>(
    batch: &[&'a Utterance],
    n_experts: usize,
    n_workers: usize,
) -> Result<Vec<WorkerShard<'a, S>>> {
    let experts = partition_experts(n_experts, n_workers)?;
    let slices = partition_experts(batch.len(), n_workers)?;
    Ok(experts
        .into_iter()
        .zip(slices)
        .enumerate()
        .map(|(w, (local_experts, slice))| WorkerShard {
            worker_id: w,
            local_experts,
            local_batch: batch[slice].to_vec(),
            outbox: vec![Vec::new(); n_workers],
            inbox: Vec::new(),
            router_probs: Vec::new(),
        })
        .collect())
}

/// Concatenates the workers' router probabilities for `layer` in worker order.
pub fn gather_probabilities<S: Scalar>(shards: &[WorkerShard<'_, S>], layer: usize) -> Result<RouterBatch<S>> {
    let mut parts = Vec::with_capacity(shards.len());
    for s in shards {
        if s.local_batch.is_empty() {
            continue;
        }
        match s.router_probs.get(layer) {
            Some(Some(b)) => parts.push(b.clone()),
            _ => {
                return Err(Error::Sync(format!(
                    "worker {} has not finished routing layer {layer}",
                    s.worker_id
                )))
            }
        }
    }
    if parts.is_empty() {
        return Err(Error::Sync(format!("no worker routed any frame at layer {layer}")));
    }
    RouterBatch::concat(&parts)
}

/// Output of one simulated step.
#[derive(Clone, Debug)]
pub struct StepResult<S: Scalar = f64> {
    pub loss: LossBreakdown,
    /// Fully reduced gradients, shaped like the model.
    pub grads: Model<S>,
    /// Expert chosen for every frame, per layer, in global frame order.
    pub selected: Vec<Vec<usize>>,
}

impl<S: Scalar> StepResult<S> {
    /// Frames routed to each expert, per layer.
    pub fn utilization(&self, n_experts: usize) -> Vec<Vec<usize>> {
        self.selected
            .iter()
            .map(|sel| {
                let mut h = vec![0; n_experts];
                sel.iter().for_each(|&e| h[e] += 1);
                h
            })
            .collect()
    }
}

/// Per-utterance state kept by the source worker.
struct UttState<S: Scalar> {
    fwd: Forward<S>,
    h: Tensor<S>,
    route_inputs: Vec<Vec<Vec<S>>>,
    decisions: Vec<Vec<RouterDecision<S>>>,
    expert_out: Vec<Tensor<S>>,
}

/// Expert caches held by an owner for one layer: `(expert, frame tags, cache)`.
type OwnerCaches<S> = Vec<(usize, Vec<(usize, usize, usize)>, ExpertCache<S>)>;

/// Runs every owner's experts over its inbox, grouped by expert in inbox order.
fn compute_forward<S: Scalar>(
    model: &Model<S>,
    layer: usize,
    shards: &mut [WorkerShard<'_, S>],
) -> Result<(Vec<Vec<Frame<S>>>, Vec<OwnerCaches<S>>)> {
    let mut processed = Vec::with_capacity(shards.len());
    let mut caches = Vec::with_capacity(shards.len());
    for shard in shards.iter_mut() {
        let inbox = std::mem::take(&mut shard.inbox);
        if let Some(f) = inbox.iter().find(|f| !shard.local_experts.contains(&f.expert)) {
            return Err(Error::Partition(format!(
                "worker {} received a frame for expert {} outside its range {:?}",
                shard.worker_id, f.expert, shard.local_experts
            )));
        }
        let mut out = Vec::with_capacity(inbox.len());
        let mut owner = Vec::new();
        for e in shard.local_experts.clone() {
            let group: Vec<&Frame<S>> = inbox.iter().filter(|f| f.expert == e).collect();
            if group.is_empty() {
                continue;
            }
            let rows: Vec<Vec<S>> = group.iter().map(|f| f.payload.clone()).collect();
            let (y, cache) = model.moe[layer].experts[e].forward(&Tensor::from_rows(&rows)?)?;
            for (i, f) in group.iter().enumerate() {
                out.push(Frame {
                    payload: y.row(i).to_vec(),
                    ..(*f).clone()
                });
            }
            owner.push((e, group.iter().map(|f| (f.src, f.utt, f.frame)).collect(), cache));
        }
        processed.push(out);
        caches.push(owner);
    }
    Ok((processed, caches))
}

/// Backward of [`compute_forward`]: expert gradients stay in the owner's buffer.
fn compute_backward<S: Scalar>(
    model: &Model<S>,
    layer: usize,
    inboxes: Vec<Vec<Frame<S>>>,
    caches: &[OwnerCaches<S>],
    buffers: &mut [Model<S>],
) -> Result<Vec<Vec<Frame<S>>>> {
    let mut processed = Vec::with_capacity(inboxes.len());
    for (w, inbox) in inboxes.into_iter().enumerate() {
        let mut out = Vec::with_capacity(inbox.len());
        for (e, tags, cache) in &caches[w] {
            let group: Vec<&Frame<S>> = inbox.iter().filter(|f| f.expert == *e).collect();
            let got: Vec<(usize, usize, usize)> = group.iter().map(|f| (f.src, f.utt, f.frame)).collect();
            if &got != tags {
                return Err(Error::Transport(format!(
                    "worker {w} expert {e}: backward frames do not match the forward dispatch"
                )));
            }
            let rows: Vec<Vec<S>> = group.iter().map(|f| f.payload.clone()).collect();
            let dx = model.moe[layer].experts[*e].backward(
                cache,
                &Tensor::from_rows(&rows)?,
                &mut buffers[w].moe[layer].experts[*e],
            )?;
            for (i, f) in group.iter().enumerate() {
                out.push(Frame {
                    payload: dx.row(i).to_vec(),
                    ..(*f).clone()
                });
            }
        }
        processed.push(out);
    }
    Ok(processed)
}

fn flat_tags<S: Scalar>(decisions: &[Vec<RouterDecision<S>>]) -> Vec<(usize, usize, usize)> {
    decisions
        .iter()
        .enumerate()
        .flat_map(|(u, ds)| ds.iter().enumerate().map(move |(t, d)| (u, t, d.selected)))
        .collect()
}

/// Adds every replicated (non-expert) parameter gradient of `src` into `dst`.
fn add_replicated<S: Scalar>(dst: &mut Model<S>, src: &Model<S>) -> Result<()> {
    fn add<S: Scalar, P: Parameters<S>>(dst: &mut P, src: &P) -> Result<()> {
        let mut from = Vec::new();
        src.visit("", &mut |_, t| from.push(t.clone()));
        let mut it = from.into_iter();
        let mut res = Ok(());
        dst.visit_mut("", &mut |_, t| {
            if let (Ok(()), Some(f)) = (&res, it.next()) {
                res = t.add_assign(&f);
            }
        });
        res
    }
    add(&mut dst.embedding, &src.embedding)?;
    add(&mut dst.input, &src.input)?;
    for l in 0..dst.moe.len() {
        add(&mut dst.moe[l].router, &src.moe[l].router)?;
        add(&mut dst.memory[l], &src.memory[l])?;
    }
    for a in 0..dst.attention.len() {
        add(&mut dst.attention[a], &src.attention[a])?;
    }
    add(&mut dst.output, &src.output)
}

/// One forward and backward pass over all shards.
///
/// With a single worker this performs exactly the arithmetic of
/// [`Model::loss_and_grads`]; with more workers only the reduction of
/// replicated gradients is reassociated.
pub fn step_parallel<S: Scalar>(
    shards: &mut [WorkerShard<'_, S>],
    model: &Model<S>,
    scope: AuxScope,
) -> Result<StepResult<S>> {
    let n_workers = shards.len();
    let n_layers = model.n_layers();
    let ranges: Vec<Range<usize>> = shards.iter().map(|s| s.local_experts.clone()).collect();
    check_partition(&ranges, model.config.n_experts)?;
    let batch_size: usize = shards.iter().map(|s| s.local_batch.len()).sum();
    if batch_size == 0 {
        return Err(Error::EmptySequence("training batch is empty".into()));
    }
    let weights = model.config.effective_weights();

    // embedding network and input projection, per worker
    let mut states: Vec<Vec<UttState<S>>> = Vec::with_capacity(n_workers);
    for shard in shards.iter_mut() {
        shard.router_probs = vec![None; n_layers];
        shard.inbox.clear();
        shard.outbox = vec![Vec::new(); n_workers];
        let mut local = Vec::with_capacity(shard.local_batch.len());
        for utt in &shard.local_batch {
            check_utterance(&model.config, utt)?;
            let frames = utt.frames.cast::<S>();
            let (embeddings, embed_cache) = model.embedding.embed(&frames)?;
            let h = model.input.forward(&frames)?;
            local.push(UttState {
                fwd: Forward {
                    log_probs: Tensor::zeros(&[1]),
                    embeddings,
                    embed_cache,
                    frames,
                    layers: Vec::with_capacity(n_layers),
                    head_input: Tensor::zeros(&[1]),
                },
                h,
                route_inputs: Vec::with_capacity(n_layers),
                decisions: Vec::with_capacity(n_layers),
                expert_out: Vec::with_capacity(n_layers),
            });
        }
        states.push(local);
    }

    let mut plans = Vec::with_capacity(n_layers);
    let mut owner_caches = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let moe = &model.moe[l];
        // route-all
        let mut payloads = Vec::with_capacity(n_workers);
        let mut tags = Vec::with_capacity(n_workers);
        for (w, local) in states.iter_mut().enumerate() {
            let mut rows = Vec::new();
            let mut probs = Vec::new();
            for st in local.iter_mut() {
                let ctx = model.context(&st.fwd.embeddings);
                let (inputs, decisions) = moe.route_frames(&st.h, &ctx)?;
                for t in 0..st.h.rows() {
                    rows.push(st.h.row(t).to_vec());
                    probs.push(decisions[t].probs.data().to_vec());
                }
                st.route_inputs.push(inputs);
                st.decisions.push(decisions);
            }
            let ds: Vec<Vec<RouterDecision<S>>> = local.iter().map(|s| s.decisions[l].clone()).collect();
            tags.push(flat_tags(&ds));
            if !probs.is_empty() {
                let refs: Vec<&[S]> = probs.iter().map(Vec::as_slice).collect();
                shards[w].router_probs[l] = Some(RouterBatch::from_rows(&refs)?);
            }
            payloads.push(rows);
        }
        // exchange-all
        let plan = DispatchPlan::new(l, tags, &ranges)?;
        for (shard, inbox) in shards.iter_mut().zip(plan.dispatch(&payloads)?) {
            shard.inbox = inbox;
        }
        // compute-all
        let (processed, caches) = compute_forward(model, l, shards)?;
        // return-all
        let rows = plan.combine(plan.give_back(processed))?;
        for (local, rows) in states.iter_mut().zip(rows) {
            let mut it = rows.into_iter();
            for st in local.iter_mut() {
                let t_len = st.h.rows();
                let out: Vec<Vec<S>> = it.by_ref().take(t_len).collect();
                let expert_out = Tensor::from_rows(&out)?;
                let y = gate_outputs(&expert_out, &st.decisions[l]);
                let (next, memory_input, attention) = model.post_moe(l, &st.h, &y)?;
                let ds = &st.decisions[l];
                let prow: Vec<Vec<S>> = ds.iter().map(|d| d.probs.data().to_vec()).collect();
                st.fwd.layers.push(LayerState {
                    moe: None,
                    probs: Tensor::from_rows(&prow)?,
                    selected: ds.iter().map(|d| d.selected).collect(),
                    memory_input,
                    attention,
                });
                st.expert_out.push(expert_out);
                st.h = next;
            }
        }
        plans.push(plan);
        owner_caches.push(caches);
    }

    // output head
    for local in states.iter_mut() {
        for st in local.iter_mut() {
            let logits = model.output.forward(&st.h)?;
            st.fwd.log_probs = tensor::log_softmax(&logits)?;
            st.fwd.head_input = st.h.clone();
        }
    }

    // router regularizers
    let (l_s, l_m, dprobs_global) = match scope {
        AuxScope::Global => {
            let gathered = (0..n_layers)
                .map(|l| gather_probabilities(shards, l))
                .collect::<Result<Vec<_>>>()?;
            let (s, m, g) = router_terms(&gathered, &weights)?;
            let mut per_worker = Vec::with_capacity(n_workers);
            let mut offset = 0;
            for shard in shards.iter() {
                let k = shard.router_probs.first().and_then(|p| p.as_ref()).map_or(0, RouterBatch::frames);
                per_worker.push(if k == 0 {
                    Vec::new()
                } else {
                    g.iter().map(|gl| gl.narrow(0, offset, k)).collect::<Result<Vec<_>>>()?
                });
                offset += k;
            }
            (s, m, per_worker)
        }
        AuxScope::PerWorker => {
            let active: Vec<usize> = (0..n_workers).filter(|&w| !shards[w].local_batch.is_empty()).collect();
            let share = 1.0 / active.len() as f64;
            let mut scaled = weights;
            scaled.alpha *= share;
            scaled.beta *= share;
            let (mut s_sum, mut m_sum) = (0.0, 0.0);
            let mut per_worker = vec![Vec::new(); n_workers];
            for &w in &active {
                let local: Vec<RouterBatch<S>> = shards[w]
                    .router_probs
                    .iter()
                    .map(|p| p.clone().ok_or_else(|| Error::Sync(format!("worker {w} has not routed"))))
                    .collect::<Result<_>>()?;
                let (s, m, g) = router_terms(&local, &scaled)?;
                s_sum += s;
                m_sum += m;
                per_worker[w] = g;
            }
            (s_sum * share, m_sum * share, per_worker)
        }
    };

    // output-side terms and backward down to the top MoE layer
    let mut buffers: Vec<Model<S>> = (0..n_workers).map(|_| model.zeroed()).collect();
    let mut parts = LossParts {
        l_s,
        l_m,
        ..LossParts::default()
    };
    let mut terms_all = Vec::with_capacity(n_workers);
    let mut dh_all: Vec<Vec<Tensor<S>>> = Vec::with_capacity(n_workers);
    for (w, local) in states.iter().enumerate() {
        let mut terms_w = Vec::with_capacity(local.len());
        let mut dh_w = Vec::with_capacity(local.len());
        for (st, utt) in local.iter().zip(&shards[w].local_batch) {
            let terms = utterance_terms(&st.fwd, utt, &weights, batch_size)?;
            parts.l_c += terms.l_c;
            parts.l_e += terms.l_e;
            parts.l_a += terms.l_a;
            parts.l_d += terms.l_d;
            dh_w.push(model.output.backward(&st.fwd.head_input, &terms.d_logits, &mut buffers[w].output)?);
            terms_w.push(terms);
        }
        terms_all.push(terms_w);
        dh_all.push(dh_w);
    }

    let mut d_ec: Vec<Vec<Tensor<S>>> = states
        .iter()
        .map(|local| local.iter().map(|st| st.fwd.embeddings.e_c.zeros_like()).collect())
        .collect();
    let mut d_ea: Vec<Vec<Option<Tensor<S>>>> = states
        .iter()
        .map(|local| local.iter().map(|st| st.fwd.embeddings.e_a.as_ref().map(Tensor::zeros_like)).collect())
        .collect();
    let mut d_ed: Vec<Vec<Option<Tensor<S>>>> = states
        .iter()
        .map(|local| local.iter().map(|st| st.fwd.embeddings.e_d.as_ref().map(Tensor::zeros_like)).collect())
        .collect();

    for l in (0..n_layers).rev() {
        // local backward to the MoE output, then dispatch gated gradients
        let mut dys: Vec<Vec<Tensor<S>>> = Vec::with_capacity(n_workers);
        let mut payloads = Vec::with_capacity(n_workers);
        for (w, local) in states.iter().enumerate() {
            let mut dys_w = Vec::with_capacity(local.len());
            let mut rows = Vec::new();
            for (u, st) in local.iter().enumerate() {
                let dy = model.post_moe_backward(l, &st.fwd.layers[l], &dh_all[w][u], &mut buffers[w])?;
                for (t, d) in st.decisions[l].iter().enumerate() {
                    rows.push(dy.row(t).iter().map(|&g| g * d.gate).collect::<Vec<S>>());
                }
                dys_w.push(dy);
            }
            dys.push(dys_w);
            payloads.push(rows);
        }
        let plan = &plans[l];
        let inboxes = plan.dispatch(&payloads)?;
        let processed = compute_backward(model, l, inboxes, &owner_caches[l], &mut buffers)?;
        let returned = plan.combine(plan.give_back(processed))?;

        for (w, (local, rows)) in states.iter().zip(returned).enumerate() {
            let mut it = rows.into_iter();
            let mut offset = 0;
            for (u, st) in local.iter().enumerate() {
                let t_len = st.h.rows();
                let dx_rows: Vec<Vec<S>> = it.by_ref().take(t_len).collect();
                let dx = Tensor::from_rows(&dx_rows)?;
                let dy = &dys[w][u];
                let dgate = gate_grads(dy, &st.expert_out[l]);
                let dp = dprobs_global[w][l].narrow(0, offset, t_len)?;
                let ctx = model.context(&st.fwd.embeddings);
                let widths = (
                    ctx.e_c.cols(),
                    ctx.e_a.map_or(0, <[S]>::len),
                    ctx.e_d.map_or(0, <[S]>::len),
                );
                let mut mg = model.moe[l].router_backward(
                    &st.route_inputs[l],
                    &st.decisions[l],
                    &dgate,
                    Some(&dp),
                    widths,
                    &mut buffers[w].moe[l],
                )?;
                mg.input.add_assign(&dx)?;
                let mut dh = dy.clone();
                dh.add_assign(&mg.input)?;
                dh_all[w][u] = dh;
                d_ec[w][u].add_assign(&mg.e_c)?;
                if let (Some(acc), Some(g)) = (&mut d_ea[w][u], &mg.e_a) {
                    acc.add_assign(g)?;
                }
                if let (Some(acc), Some(g)) = (&mut d_ed[w][u], &mg.e_d) {
                    acc.add_assign(g)?;
                }
                offset += t_len;
            }
        }
    }

    for (w, local) in states.iter().enumerate() {
        for (u, st) in local.iter().enumerate() {
            model.input.backward_params(&st.fwd.frames, &dh_all[w][u], &mut buffers[w].input)?;
            model.embedding_backward(
                &st.fwd,
                &terms_all[w][u],
                std::mem::replace(&mut d_ec[w][u], Tensor::zeros(&[1])),
                d_ea[w][u].take(),
                d_ed[w][u].take(),
                &mut buffers[w],
            )?;
        }
    }

    // reduce: replicated parameters in ascending worker id, experts from their owner
    let mut buffers = buffers.into_iter();
    let mut grads = buffers.next().expect("at least one worker");
    for (w, buf) in buffers.enumerate().map(|(i, b)| (i + 1, b)) {
        add_replicated(&mut grads, &buf)?;
        for l in 0..n_layers {
            for e in ranges[w].clone() {
                grads.moe[l].experts[e] = buf.moe[l].experts[e].clone();
            }
        }
    }

    let inv_b = 1.0 / batch_size as f64;
    parts.l_c *= inv_b;
    parts.l_e *= inv_b;
    parts.l_a *= inv_b;
    parts.l_d *= inv_b;
    let loss = combine(&parts, &weights)?;
    let selected = (0..n_layers)
        .map(|l| {
            states
                .iter()
                .flatten()
                .flat_map(|st| st.decisions[l].iter().map(|d| d.selected))
                .collect()
        })
        .collect();
    Ok(StepResult { loss, grads, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, RouterVariant};
    use crate::data::{generate, SynthConfig};
    use crate::losses::mean_importance_loss;
    use crate::model::build_model;

    #[test]
    fn partition_examples() {
        assert_eq!(partition_experts(4, 2).unwrap(), vec![0..2, 2..4]);
        assert_eq!(partition_experts(16, 4).unwrap(), vec![0..4, 4..8, 8..12, 12..16]);
        assert_eq!(partition_experts(5, 2).unwrap(), vec![0..3, 3..5]);
        assert_eq!(partition_experts(2, 4).unwrap(), vec![0..1, 1..2, 2..2, 2..2]);
        assert!(matches!(partition_experts(3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn partition_check_rejects_gaps_and_overlaps() {
        assert!(check_partition(&[0..2, 2..4], 4).is_ok());
        assert!(matches!(check_partition(&[0..2, 3..4], 4), Err(Error::Partition(_))));
        assert!(matches!(check_partition(&[0..3, 2..4], 4), Err(Error::Partition(_))));
        assert!(matches!(check_partition(&[0..5], 4), Err(Error::Partition(_))));
    }

    fn plan() -> DispatchPlan {
        let tags = vec![
            vec![(0, 0, 3), (0, 1, 0), (1, 0, 2)],
            vec![(0, 0, 1), (0, 1, 1), (0, 2, 3), (1, 0, 0)],
        ];
        DispatchPlan::new(0, tags, &partition_experts(4, 2).unwrap()).unwrap()
    }

    fn payloads() -> Vec<Vec<Vec<f64>>> {
        vec![
            vec![vec![0.1, -2.0], vec![1e-300, 3.0], vec![f64::MIN_POSITIVE, 7.5]],
            vec![vec![1.0, 2.0], vec![-0.0, 4.0], vec![5.0, 6.0], vec![1.0 / 3.0, 9.0]],
        ]
    }

    #[test]
    fn dispatch_round_trip_is_bit_exact() {
        let p = plan();
        let x = payloads();
        let inboxes = p.dispatch(&x).unwrap();
        assert_eq!(inboxes[0].len() + inboxes[1].len(), 7);
        for (w, inbox) in inboxes.iter().enumerate() {
            assert!(inbox.iter().all(|f| (w == 0) == (f.expert < 2)));
        }
        let back = p.combine(p.give_back(inboxes)).unwrap();
        for (a, b) in back.iter().flatten().zip(x.iter().flatten()) {
            let bits = |v: &Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn inbox_order_is_source_then_local_frame() {
        let inboxes = plan().dispatch(&payloads()).unwrap();
        let order: Vec<(usize, usize, usize)> = inboxes[1].iter().map(|f| (f.src, f.utt, f.frame)).collect();
        assert_eq!(order, vec![(0, 0, 0), (0, 1, 0), (1, 0, 2)]);
    }

    #[test]
    fn lost_or_duplicated_frames_are_transport_errors() {
        let p = plan();
        let mut back = p.give_back(p.dispatch(&payloads()).unwrap());
        let mut lost = back.clone();
        lost[1].pop();
        assert!(matches!(p.combine(lost), Err(Error::Transport(_))));
        let dup = back[0][0].clone();
        back[0].push(dup);
        assert!(matches!(p.combine(back), Err(Error::Transport(_))));
    }

    #[test]
    fn wrong_expert_is_a_transport_error() {
        let p = plan();
        let mut back = p.give_back(p.dispatch(&payloads()).unwrap());
        back[0][0].expert = (back[0][0].expert + 1) % 4;
        assert!(matches!(p.combine(back), Err(Error::Transport(_))));
    }

    #[test]
    fn gather_concatenates_in_worker_order() {
        let a = RouterBatch::new(Tensor::filled(&[3, 2], 0.5)).unwrap();
        let b = RouterBatch::new(Tensor::matrix(5, 2, [1.0, 0.0].repeat(5)).unwrap()).unwrap();
        let u = generate(&SynthConfig::default(), 2).unwrap();
        let mut shards: Vec<WorkerShard> = make_shards(&[&u[0], &u[1]], 2, 2).unwrap();
        shards[0].router_probs = vec![Some(a.clone())];
        assert!(matches!(gather_probabilities(&shards, 0), Err(Error::Sync(_))));
        shards[1].router_probs = vec![Some(b)];
        let g = gather_probabilities(&shards, 0).unwrap();
        assert_eq!(g.frames(), 8);
        assert_eq!(g.probs().row(0), a.probs().row(0));
        assert_eq!(g.probs().row(7), &[1.0, 0.0]);
    }

    #[test]
    fn global_importance_differs_from_per_worker_average_under_skew() {
        let w0 = RouterBatch::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        let w1 = RouterBatch::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]]).unwrap();
        let global = RouterBatch::concat(&[w0.clone(), w1.clone()]).unwrap();
        let g = mean_importance_loss(&global).unwrap().0;
        let avg = 0.5 * (mean_importance_loss(&w0).unwrap().0 + mean_importance_loss(&w1).unwrap().0);
        assert_eq!(g, 1.0);
        assert_eq!(avg, 2.0);
        assert_ne!(g, avg);
    }

    fn setup(seed: u64) -> (ModelConfig, Vec<Utterance>) {
        let cfg = ModelConfig {
            n_moe_layers: 2,
            n_memory_layers: 2,
            attention_every: 1,
            n_experts: 4,
            d_feat: 5,
            d_model: 6,
            expert_hidden: 5,
            memory_order: 1,
            d_att: 4,
            d_c: 4,
            d_a: 3,
            d_d: 2,
            embed_memory_layers: 1,
            router: RouterVariant::Moe2,
            vocab: 3,
            n_domains: 2,
            n_accents: 2,
            seed,
            ..ModelConfig::default()
        };
        let mut s = SynthConfig {
            t_min: 5,
            t_max: 9,
            max_labels: 2,
            seed: seed + 1,
            ..SynthConfig::default()
        };
        s.align_with(&cfg);
        (cfg, generate(&s, 5).unwrap())
    }

    fn flat(m: &Model) -> Vec<f64> {
        let mut v = Vec::new();
        m.visit("", &mut |_, t| v.extend_from_slice(t.data()));
        v
    }

    #[test]
    fn single_worker_is_bit_identical_to_plain_step() {
        for seed in 0..3 {
            let (cfg, data) = setup(seed);
            let model: Model = build_model(&cfg).unwrap();
            let batch: Vec<&Utterance> = data.iter().collect();
            let (loss, grads) = model.loss_and_grads(&batch).unwrap();
            let mut shards = make_shards(&batch, cfg.n_experts, 1).unwrap();
            let r = step_parallel(&mut shards, &model, AuxScope::Global).unwrap();
            assert_eq!(r.loss.total.to_bits(), loss.total.to_bits());
            let (a, b) = (flat(&r.grads), flat(&grads));
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn multi_worker_gradients_match_single_worker() {
        for seed in 0..3 {
            let (cfg, data) = setup(seed);
            let model: Model = build_model(&cfg).unwrap();
            let batch: Vec<&Utterance> = data.iter().collect();
            let (loss, grads) = model.loss_and_grads(&batch).unwrap();
            for workers in [2, 3, 4] {
                let mut shards = make_shards(&batch, cfg.n_experts, workers).unwrap();
                let r = step_parallel(&mut shards, &model, AuxScope::Global).unwrap();
                assert!((r.loss.total - loss.total).abs() <= 1e-9);
                for (x, y) in flat(&r.grads).iter().zip(flat(&grads)) {
                    assert!((x - y).abs() <= 1e-9, "{workers} workers: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn per_worker_scope_changes_importance_loss() {
        let (cfg, data) = setup(1);
        let model: Model = build_model(&cfg).unwrap();
        let batch: Vec<&Utterance> = data.iter().collect();
        let mut s1 = make_shards(&batch, cfg.n_experts, 2).unwrap();
        let global = step_parallel(&mut s1, &model, AuxScope::Global).unwrap();
        let mut s2 = make_shards(&batch, cfg.n_experts, 2).unwrap();
        let local = step_parallel(&mut s2, &model, AuxScope::PerWorker).unwrap();
        assert_eq!(global.loss.l_c, local.loss.l_c);
        assert_ne!(global.loss.l_m, local.loss.l_m);
    }

    #[test]
    fn uncovered_expert_is_a_partition_error() {
        let (cfg, data) = setup(0);
        let model: Model = build_model(&cfg).unwrap();
        let batch: Vec<&Utterance> = data.iter().collect();
        let mut shards = make_shards(&batch, cfg.n_experts, 2).unwrap();
        shards[1].local_experts = 2..3;
        assert!(matches!(
            step_parallel(&mut shards, &model, AuxScope::Global),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn utilization_sums_to_frames() {
        let (cfg, data) = setup(2);
        let model: Model = build_model(&cfg).unwrap();
        let batch: Vec<&Utterance> = data.iter().collect();
        let frames: usize = data.iter().map(Utterance::len).sum();
        let mut shards = make_shards(&batch, cfg.n_experts, 2).unwrap();
        let r = step_parallel(&mut shards, &model, AuxScope::Global).unwrap();
        for h in r.utilization(cfg.n_experts) {
            assert_eq!(h.iter().sum::<usize>(), frames);
        }
    }
}
