//! Shared embedding network: frame-level grapheme embedding plus pooled,
//! projected accent and domain embeddings with their classification heads.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::layers::{glorot, join, Linear, MemoryLayer, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Utterance-level head: mean-pooled trunk output → projection → classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead<S: Scalar = f64> {
    /// `d_c × d_e`; the projection whose output is fed to the routers.
    pub proj: Tensor<S>,
    pub classifier: Linear<S>,
}

impl<S: Scalar> TaskHead<S> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_c: usize, d_e: usize, n_classes: usize) -> Self {
        TaskHead {
            proj: glorot(rng, d_c, d_e),
            classifier: Linear::init(rng, d_e, n_classes, true),
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.cols()
    }

    fn forward(&self, pooled: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let emb = tensor::vecmat(pooled.data(), &self.proj)?;
        let logits = self.classifier.forward(&emb.as_matrix()?)?.reshape(vec![self.classifier.d_out()])?;
        Ok((emb, logits))
    }

    /// Returns the gradient on the pooled vector.
    fn backward(
        &self,
        pooled: &Tensor<S>,
        emb: &Tensor<S>,
        d_emb: Option<&Tensor<S>>,
        d_logits: Option<&Tensor<S>>,
        grads: &mut TaskHead<S>,
    ) -> Result<Tensor<S>> {
        let mut g_emb = Tensor::zeros(&[self.dim()]);
        if let Some(d) = d_emb {
            g_emb.add_assign(d)?;
        }
        if let Some(dl) = d_logits {
            let dl = dl.as_matrix()?;
            let back = self.classifier.backward(&emb.as_matrix()?, &dl, &mut grads.classifier)?;
            g_emb.add_assign(&back.reshape(vec![self.dim()])?)?;
        }
        let p = pooled.as_matrix()?;
        let mut dp = p.zeros_like();
        tensor::matmul_backward_acc(&p, &self.proj, &g_emb.as_matrix()?, Some(&mut dp), Some(&mut grads.proj))?;
        dp.reshape(vec![pooled.len()])
    }
}

impl<S: Scalar> Parameters<S> for TaskHead<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(join(prefix, "proj"), &self.proj);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "proj"), &mut self.proj);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNetwork<S: Scalar = f64> {
    pub input: Linear<S>,
    pub memory: Vec<MemoryLayer<S>>,
    /// CTC logits over the vocabulary plus blank.
    pub grapheme_head: Linear<S>,
    pub accent: Option<TaskHead<S>>,
    pub domain: Option<TaskHead<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingOutputs<S: Scalar = f64> {
    /// `T×d_c`
    pub e_c: Tensor<S>,
    pub e_a: Option<Tensor<S>>,
    pub e_d: Option<Tensor<S>>,
    /// `T×(V+1)`
    pub grapheme_logits: Tensor<S>,
    pub accent_logits: Option<Tensor<S>>,
    pub domain_logits: Option<Tensor<S>>,
}

#[derive(Clone, Debug)]
pub struct EmbedCache<S: Scalar = f64> {
    frames: Tensor<S>,
    pre_act: Tensor<S>,
    memory_inputs: Vec<Tensor<S>>,
    e_c: Tensor<S>,
    pooled: Tensor<S>,
    e_a: Option<Tensor<S>>,
    e_d: Option<Tensor<S>>,
}

/// Upstream gradients on any subset of the six outputs.
#[derive(Clone, Debug, Default)]
pub struct EmbedUpstream<S: Scalar = f64> {
    pub e_c: Option<Tensor<S>>,
    pub e_a: Option<Tensor<S>>,
    pub e_d: Option<Tensor<S>>,
    pub grapheme_logits: Option<Tensor<S>>,
    pub accent_logits: Option<Tensor<S>>,
    pub domain_logits: Option<Tensor<S>>,
}

#[derive(Clone, Debug)]
pub struct EmbedGrads<S: Scalar = f64> {
    /// Total gradient arriving at the grapheme embedding (routers, grapheme head and pooling).
    pub e_c: Tensor<S>,
    pub frames: Tensor<S>,
}

impl<S: Scalar> EmbeddingNetwork<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        d_feat: usize,
        d_c: usize,
        memory_layers: usize,
        memory_order: usize,
        vocab: usize,
        heads: Option<(usize, usize, usize, usize)>,
    ) -> Self {
        let input = Linear::init(rng, d_feat, d_c, true);
        let memory = (0..memory_layers)
            .map(|_| MemoryLayer::identity(memory_order, d_c))
            .collect();
        let grapheme_head = Linear::init(rng, d_c, vocab + 1, true);
        let (accent, domain) = match heads {
            Some((d_a, n_accents, d_d, n_domains)) => (
                Some(TaskHead::init(rng, d_c, d_a, n_accents)),
                Some(TaskHead::init(rng, d_c, d_d, n_domains)),
            ),
            None => (None, None),
        };
        EmbeddingNetwork {
            input,
            memory,
            grapheme_head,
            accent,
            domain,
        }
    }

    pub fn d_c(&self) -> usize {
        self.input.d_out()
    }

    pub fn embed(&self, frames: &Tensor<S>) -> Result<(EmbeddingOutputs<S>, EmbedCache<S>)> {
        if frames.rank() != 2 || frames.cols() != self.input.d_in() {
            return Err(dim_err(format!(
                "embedding network expects T×{} frames, got {:?}",
                self.input.d_in(),
                frames.shape()
            )));
        }
        let pre_act = self.input.forward(frames)?;
        let mut h = tensor::relu(&pre_act);
        let mut memory_inputs = Vec::with_capacity(self.memory.len());
        for m in &self.memory {
            let next = m.forward(&h)?;
            memory_inputs.push(h);
            h = next;
        }
        let e_c = h;
        let grapheme_logits = self.grapheme_head.forward(&e_c)?;
        let pooled = tensor::mean_over_time(&e_c)?;
        let run = |head: &Option<TaskHead<S>>| -> Result<(Option<Tensor<S>>, Option<Tensor<S>>)> {
            match head {
                Some(h) => {
                    let (emb, logits) = h.forward(&pooled)?;
                    Ok((Some(emb), Some(logits)))
                }
                None => Ok((None, None)),
            }
        };
        let (e_a, accent_logits) = run(&self.accent)?;
        let (e_d, domain_logits) = run(&self.domain)?;
        let cache = EmbedCache {
            frames: frames.clone(),
            pre_act,
            memory_inputs,
            e_c: e_c.clone(),
            pooled,
            e_a: e_a.clone(),
            e_d: e_d.clone(),
        };
        Ok((
            EmbeddingOutputs {
                e_c,
                e_a,
                e_d,
                grapheme_logits,
                accent_logits,
                domain_logits,
            },
            cache,
        ))
    }

    pub fn backward(
        &self,
        cache: &EmbedCache<S>,
        up: &EmbedUpstream<S>,
        grads: &mut EmbeddingNetwork<S>,
    ) -> Result<EmbedGrads<S>> {
        let t_len = cache.e_c.rows();
        let mut d_ec = match &up.e_c {
            Some(g) if g.shape() != cache.e_c.shape() => {
                return Err(Error::State(format!(
                    "embedding cache has e_c {:?}, upstream gradient {:?}",
                    cache.e_c.shape(),
                    g.shape()
                )))
            }
            Some(g) => g.clone(),
            None => cache.e_c.zeros_like(),
        };
        if let Some(g) = &up.grapheme_logits {
            let back = self.grapheme_head.backward(&cache.e_c, g, &mut grads.grapheme_head)?;
            d_ec.add_assign(&back)?;
        }
        let mut d_pooled: Option<Tensor<S>> = None;
        let heads = [
            (&self.accent, &mut grads.accent, &cache.e_a, &up.e_a, &up.accent_logits),
            (&self.domain, &mut grads.domain, &cache.e_d, &up.e_d, &up.domain_logits),
        ];
        for (head, head_grads, emb, d_emb, d_logits) in heads {
            if d_emb.is_none() && d_logits.is_none() {
                continue;
            }
            let (head, head_grads, emb) = match (head, head_grads, emb) {
                (Some(h), Some(g), Some(e)) => (h, g, e),
                _ => return Err(Error::State("gradient supplied for a missing task head".into())),
            };
            let dp = head.backward(&cache.pooled, emb, d_emb.as_ref(), d_logits.as_ref(), head_grads)?;
            match &mut d_pooled {
                Some(acc) => acc.add_assign(&dp)?,
                None => d_pooled = Some(dp),
            }
        }
        if let Some(dp) = d_pooled {
            d_ec.add_assign(&tensor::mean_over_time_backward(t_len, &dp)?)?;
        }
        let total_ec = d_ec.clone();
        let mut g = d_ec;
        for (i, m) in self.memory.iter().enumerate().rev() {
            g = m.backward(&cache.memory_inputs[i], &g, &mut grads.memory[i])?;
        }
        let dpre = tensor::relu_backward(&cache.pre_act, &g)?;
        let frames = self.input.backward(&cache.frames, &dpre, &mut grads.input)?;
        Ok(EmbedGrads { e_c: total_ec, frames })
    }
}

impl<S: Scalar> Parameters<S> for EmbeddingNetwork<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.input.visit(&join(prefix, "input"), f);
        for (i, m) in self.memory.iter().enumerate() {
            m.visit(&join(prefix, &format!("memory{i}")), f);
        }
        self.grapheme_head.visit(&join(prefix, "grapheme_head"), f);
        if let Some(h) = &self.accent {
            h.visit(&join(prefix, "accent"), f);
        }
        if let Some(h) = &self.domain {
            h.visit(&join(prefix, "domain"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        for (i, m) in self.memory.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &format!("memory{i}")), f);
        }
        self.grapheme_head.visit_mut(&join(prefix, "grapheme_head"), f);
        if let Some(h) = &mut self.accent {
            h.visit_mut(&join(prefix, "accent"), f);
        }
        if let Some(h) = &mut self.domain {
            h.visit_mut(&join(prefix, "domain"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, probe, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn net(seed: u64) -> EmbeddingNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = EmbeddingNetwork::init(&mut rng, 5, 4, 2, 1, 3, Some((3, 4, 2, 6)));
        for m in &mut n.memory {
            m.taps = random(&mut rng, &[3, 4]).scale(0.3);
        }
        n
    }

    #[test]
    fn constant_trunk_output_gives_length_independent_embeddings() {
        let n = net(0);
        let frame = Tensor::from_rows(&[vec![0.3, -0.1, 0.8, 0.2, -0.5]]).unwrap();
        // memory layers off, so a repeated frame gives a constant trunk output
        let mut flat = n.clone();
        flat.memory.iter_mut().for_each(|m| m.taps.scale_in_place(0.0));
        let (one, _) = flat.embed(&frame).unwrap();
        let five = tensor::concat(&[&frame; 5], 0).unwrap();
        let (many, _) = flat.embed(&five).unwrap();
        for (a, b) in one.e_a.unwrap().data().iter().zip(many.e_a.unwrap().data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_frame_projection_is_exact() {
        let n = net(1);
        let frame = Tensor::from_rows(&[vec![0.1, 0.2, -0.3, 0.4, 0.5]]).unwrap();
        let (out, _) = n.embed(&frame).unwrap();
        let expected = tensor::vecmat(out.e_c.row(0), &n.accent.as_ref().unwrap().proj).unwrap();
        assert_eq!(out.e_a.unwrap(), expected);
    }

    #[test]
    fn pooled_projection_matches_scalar_loop() {
        let n = net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = random(&mut rng, &[6, 5]);
        let (out, _) = n.embed(&frames).unwrap();
        let proj = &n.domain.as_ref().unwrap().proj;
        for j in 0..proj.cols() {
            let mut s = 0.0;
            for p in 0..proj.rows() {
                let mut col = 0.0;
                for t in 0..6 {
                    col += out.e_c.get2(t, p);
                }
                s += col / 6.0 * proj.get2(p, j);
            }
            assert!((out.e_d.as_ref().unwrap().data()[j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_embeddings_are_order_and_repetition_invariant() {
        let n = net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = random(&mut rng, &[4, 5]);
        let mut flat = n.clone();
        flat.memory.iter_mut().for_each(|m| m.taps.scale_in_place(0.0));
        let (a, _) = flat.embed(&frames).unwrap();
        let order = [2usize, 0, 3, 1];
        let rows: Vec<Vec<f64>> = order.iter().map(|&t| frames.row(t).to_vec()).collect();
        let (b, _) = flat.embed(&Tensor::from_rows(&rows).unwrap()).unwrap();
        let doubled: Vec<Vec<f64>> = (0..4).flat_map(|t| [frames.row(t).to_vec(), frames.row(t).to_vec()]).collect();
        let (c, _) = flat.embed(&Tensor::from_rows(&doubled).unwrap()).unwrap();
        for other in [&b, &c] {
            for (x, y) in a.e_a.as_ref().unwrap().data().iter().zip(other.e_a.as_ref().unwrap().data()) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in a.e_d.as_ref().unwrap().data().iter().zip(other.e_d.as_ref().unwrap().data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for (i, &t) in order.iter().enumerate() {
            assert_eq!(b.e_c.row(i), a.e_c.row(t));
        }
    }

    #[test]
    fn accent_gradient_spreads_evenly_over_frames() {
        let n = net(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = random(&mut rng, &[7, 5]);
        let (_, cache) = n.embed(&frames).unwrap();
        let g = random(&mut rng, &[3]);
        let mut grads = n.zeroed();
        let up = EmbedUpstream {
            e_a: Some(g.clone()),
            ..Default::default()
        };
        let out = n.backward(&cache, &up, &mut grads).unwrap();
        let proj = &n.accent.as_ref().unwrap().proj;
        for t in 0..7 {
            for p in 0..4 {
                let expected: f64 = (0..3).map(|j| proj.get2(p, j) * g.data()[j]).sum::<f64>() / 7.0;
                assert!((out.e_c.get2(t, p) - expected).abs() < 1e-14);
            }
        }
        let zero = n.backward(&cache, &EmbedUpstream::default(), &mut n.zeroed()).unwrap();
        assert!(zero.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_utterance_is_rejected() {
        let n = net(6);
        assert!(Tensor::<f64>::new(vec![0, 5], vec![]).is_err());
        assert!(matches!(tensor::mean_over_time_rows::<f64>(&[]), Err(Error::EmptySequence(_))));
        assert!(n.embed(&Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            let n = net(10 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = random(&mut rng, &[6, 5]);
            let w_ec = random(&mut rng, &[6, 4]);
            let w_ea = random(&mut rng, &[3]);
            let w_ed = random(&mut rng, &[2]);
            let w_gl = random(&mut rng, &[6, 4]);
            let w_al = random(&mut rng, &[4]);
            let w_dl = random(&mut rng, &[6]);
            let loss = |net: &EmbeddingNetwork, x: &Tensor| {
                let (o, _) = net.embed(x).unwrap();
                probe(&o.e_c, &w_ec)
                    + probe(o.e_a.as_ref().unwrap(), &w_ea)
                    + probe(o.e_d.as_ref().unwrap(), &w_ed)
                    + probe(&o.grapheme_logits, &w_gl)
                    + probe(o.accent_logits.as_ref().unwrap(), &w_al)
                    + probe(o.domain_logits.as_ref().unwrap(), &w_dl)
            };
            let (_, cache) = n.embed(&frames).unwrap();
            let up = EmbedUpstream {
                e_c: Some(w_ec.clone()),
                e_a: Some(w_ea.clone()),
                e_d: Some(w_ed.clone()),
                grapheme_logits: Some(w_gl.clone()),
                accent_logits: Some(w_al.clone()),
                domain_logits: Some(w_dl.clone()),
            };
            let mut grads = n.zeroed();
            let g = n.backward(&cache, &up, &mut grads).unwrap();
            for r in gradcheck::check_params(&n, &grads, DEFAULT_EPS, usize::MAX, |p| loss(p, &frames)) {
                assert!(r.passes(1e-4), "{r:?}");
            }
            let r = gradcheck::check_tensor("frames", &frames, &g.frames, DEFAULT_EPS, |x| loss(&n, x));
            assert!(r.passes(1e-4), "{r:?}");
        }
    }
}
