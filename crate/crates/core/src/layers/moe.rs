use rand::Rng;

use super::{join, Expert, ExpertCache, Parameters, Router, RouterDecision};
use crate::config::RouterVariant;
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Embeddings consumed by the router of every MoE layer for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct RouterContext<'a, S: Scalar = f64> {
    /// Frame-level grapheme embedding, `T×d_c`.
    pub e_c: &'a Tensor<S>,
    /// Utterance-level accent embedding (augmented routers only).
    pub e_a: Option<&'a [S]>,
    /// Utterance-level domain embedding (augmented routers only).
    pub e_d: Option<&'a [S]>,
}

impl<S: Scalar> RouterContext<'_, S> {
    fn widths(&self) -> (usize, usize, usize) {
        (
            self.e_c.cols(),
            self.e_a.map_or(0, <[S]>::len),
            self.e_d.map_or(0, <[S]>::len),
        )
    }
}

/// Top-1 routed mixture-of-experts layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer<S: Scalar = f64> {
    pub experts: Vec<Expert<S>>,
    pub router: Router<S>,
    pub layer_index: usize,
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug)]
pub struct MoeCache<S: Scalar = f64> {
    route_inputs: Vec<Vec<S>>,
    decisions: Vec<RouterDecision<S>>,
    expert_outputs: Tensor<S>,
    groups: Vec<(usize, Vec<usize>, ExpertCache<S>)>,
    widths: (usize, usize, usize),
}

/// Gradients with respect to the inputs of an MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeGrads<S: Scalar = f64> {
    pub input: Tensor<S>,
    pub e_c: Tensor<S>,
    pub e_a: Option<Tensor<S>>,
    pub e_d: Option<Tensor<S>>,
}

impl<S: Scalar> MoeLayer<S> {
    pub fn new(experts: Vec<Expert<S>>, router: Router<S>, layer_index: usize) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::Config("an MoE layer needs at least one expert".into()))?;
        for e in &experts[1..] {
            first.check_same_shape(e)?;
        }
        if router.n_experts() != experts.len() {
            return Err(dim_err(format!(
                "router scores {} experts but the layer has {}",
                router.n_experts(),
                experts.len()
            )));
        }
        if router.d_route() < first.d_in() {
            return Err(dim_err("router input narrower than the expert input"));
        }
        Ok(MoeLayer {
            experts,
            router,
            layer_index,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        layer_index: usize,
        d_route: usize,
        d_model: usize,
        d_hidden: usize,
        n_experts: usize,
        variant: RouterVariant,
    ) -> Self {
        let experts = (0..n_experts)
            .map(|_| Expert::init(rng, d_model, d_hidden, d_model))
            .collect();
        let router = Router::init(rng, d_route, n_experts, variant);
        MoeLayer {
            experts,
            router,
            layer_index,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Routes every frame of `x` (`T×d_in`). Returns router inputs and decisions.
    pub fn route_frames(
        &self,
        x: &Tensor<S>,
        ctx: &RouterContext<'_, S>,
    ) -> Result<(Vec<Vec<S>>, Vec<RouterDecision<S>>)> {
        if x.rank() != 2 || ctx.e_c.rank() != 2 || ctx.e_c.rows() != x.rows() {
            return Err(dim_err(format!(
                "MoE input {:?} and grapheme embedding {:?} must be T×d with equal T",
                x.shape(),
                ctx.e_c.shape()
            )));
        }
        let mut inputs = Vec::with_capacity(x.rows());
        let mut decisions = Vec::with_capacity(x.rows());
        for t in 0..x.rows() {
            let input = self.router.input(ctx.e_c.row(t), ctx.e_a, ctx.e_d, x.row(t))?;
            decisions.push(self.router.decide(&input)?);
            inputs.push(input);
        }
        Ok((inputs, decisions))
    }

    pub fn forward(
        &self,
        x: &Tensor<S>,
        ctx: &RouterContext<'_, S>,
    ) -> Result<(Tensor<S>, Vec<RouterDecision<S>>, MoeCache<S>)> {
        let (route_inputs, decisions) = self.route_frames(x, ctx)?;
        let d_out = self.experts[0].d_out();
        let mut expert_outputs = Tensor::zeros(&[x.rows(), d_out]);
        let mut groups = Vec::new();
        for (e, expert) in self.experts.iter().enumerate() {
            let frames: Vec<usize> = (0..x.rows()).filter(|&t| decisions[t].selected == e).collect();
            if frames.is_empty() {
                continue;
            }
            let rows: Vec<Vec<S>> = frames.iter().map(|&t| x.row(t).to_vec()).collect();
            let (out, cache) = expert.forward(&Tensor::from_rows(&rows)?)?;
            for (i, &t) in frames.iter().enumerate() {
                expert_outputs.row_mut(t).copy_from_slice(out.row(i));
            }
            groups.push((e, frames, cache));
        }
        let y = gate_outputs(&expert_outputs, &decisions);
        let cache = MoeCache {
            route_inputs,
            decisions: decisions.clone(),
            expert_outputs,
            groups,
            widths: ctx.widths(),
        };
        Ok((y, decisions, cache))
    }

    /// Backward through gating, the selected experts and the router.
    ///
    /// `dprobs` is an optional extra gradient on the full router distribution
    /// (`T×n`), e.g. from the sparsity and importance losses.
    pub fn backward(
        &self,
        cache: &MoeCache<S>,
        dy: &Tensor<S>,
        dprobs: Option<&Tensor<S>>,
        grads: &mut MoeLayer<S>,
    ) -> Result<MoeGrads<S>> {
        let t_len = cache.decisions.len();
        if dy.shape() != cache.expert_outputs.shape() {
            return Err(Error::State(format!(
                "MoE cache holds {} frames but upstream gradient has shape {:?}",
                t_len,
                dy.shape()
            )));
        }
        let d_in = self.experts[0].d_in();
        let mut dx = Tensor::zeros(&[t_len, d_in]);
        for (e, frames, ecache) in &cache.groups {
            let rows: Vec<Vec<S>> = frames
                .iter()
                .map(|&t| {
                    let gate = cache.decisions[t].gate;
                    dy.row(t).iter().map(|&g| g * gate).collect()
                })
                .collect();
            let dxe = self.experts[*e].backward(ecache, &Tensor::from_rows(&rows)?, &mut grads.experts[*e])?;
            for (i, &t) in frames.iter().enumerate() {
                dx.row_mut(t).copy_from_slice(dxe.row(i));
            }
        }
        let dgate = gate_grads(dy, &cache.expert_outputs);
        let mut out = self.router_backward(&cache.route_inputs, &cache.decisions, &dgate, dprobs, cache.widths, grads)?;
        out.input.add_assign(&dx)?;
        Ok(out)
    }

    /// Router part of the backward pass, shared with the expert-parallel runtime.
    pub fn router_backward(
        &self,
        route_inputs: &[Vec<S>],
        decisions: &[RouterDecision<S>],
        dgate: &[S],
        dprobs: Option<&Tensor<S>>,
        widths: (usize, usize, usize),
        grads: &mut MoeLayer<S>,
    ) -> Result<MoeGrads<S>> {
        let t_len = decisions.len();
        let n = self.n_experts();
        if let Some(dp) = dprobs {
            if dp.shape() != [t_len, n] {
                return Err(dim_err(format!(
                    "router probability gradient {:?}, expected [{t_len}, {n}]",
                    dp.shape()
                )));
            }
        }
        let (d_c, d_a, d_d) = widths;
        let d_in = self.router.d_route() - d_c - d_a - d_d;
        let mut out = MoeGrads {
            input: Tensor::zeros(&[t_len, d_in]),
            e_c: Tensor::zeros(&[t_len, d_c]),
            e_a: (d_a > 0).then(|| Tensor::zeros(&[d_a])),
            e_d: (d_d > 0).then(|| Tensor::zeros(&[d_d])),
        };
        for t in 0..t_len {
            let dec = &decisions[t];
            let mut dp = match dprobs {
                Some(dp) => dp.row(t).to_vec(),
                None => vec![S::zero(); n],
            };
            dp[dec.selected] += dgate[t];
            let dinput = self
                .router
                .backward_frame(&route_inputs[t], dec.probs.data(), &dp, &mut grads.router)?;
            let (c, rest) = dinput.split_at(d_c);
            let (a, rest) = rest.split_at(d_a);
            let (d, o) = rest.split_at(d_d);
            out.e_c.row_mut(t).copy_from_slice(c);
            if let Some(ga) = &mut out.e_a {
                ga.data_mut().iter_mut().zip(a).for_each(|(g, &v)| *g += v);
            }
            if let Some(gd) = &mut out.e_d {
                gd.data_mut().iter_mut().zip(d).for_each(|(g, &v)| *g += v);
            }
            out.input.row_mut(t).copy_from_slice(o);
        }
        Ok(out)
    }
}

/// `y_t = gate_t · expert_out_t`.
pub(crate) fn gate_outputs<S: Scalar>(expert_outputs: &Tensor<S>, decisions: &[RouterDecision<S>]) -> Tensor<S> {
    let mut y = expert_outputs.clone();
    for (t, d) in decisions.iter().enumerate() {
        y.row_mut(t).iter_mut().for_each(|v| *v *= d.gate);
    }
    y
}

/// `∂L/∂gate_t = ⟨dy_t, expert_out_t⟩`.
pub(crate) fn gate_grads<S: Scalar>(dy: &Tensor<S>, expert_outputs: &Tensor<S>) -> Vec<S> {
    (0..dy.rows())
        .map(|t| dy.row(t).iter().zip(expert_outputs.row(t)).map(|(&a, &b)| a * b).sum())
        .collect()
}

impl<S: Scalar> Parameters<S> for MoeLayer<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.router.visit(&join(prefix, "router"), f);
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&join(prefix, &format!("expert{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.router.visit_mut(&join(prefix, "router"), f);
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("expert{i}")), f);
        }
    }
}
