use rand::Rng;

use super::{glorot, join, Parameters};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Single-head full-context scaled dot-product self-attention with a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<S: Scalar = f64> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<S: Scalar = f64> {
    x: Tensor<S>,
    q: Tensor<S>,
    k: Tensor<S>,
    v: Tensor<S>,
    /// Attention weights, `T×T`; each row is a distribution.
    pub weights: Tensor<S>,
    ctx: Tensor<S>,
}

impl<S: Scalar> AttentionLayer<S> {
    pub fn new(wq: Tensor<S>, wk: Tensor<S>, wv: Tensor<S>, wo: Tensor<S>) -> Result<Self> {
        let d = wq.rows();
        let d_att = wq.cols();
        let ok = [&wq, &wk, &wv].iter().all(|w| w.shape() == [d, d_att]) && wo.shape() == [d_att, d];
        if !ok {
            return Err(dim_err("attention projections must be d×d_att (q, k, v) and d_att×d (o)"));
        }
        Ok(AttentionLayer { wq, wk, wv, wo })
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, d_att: usize) -> Self {
        AttentionLayer {
            wq: glorot(rng, d, d_att),
            wk: glorot(rng, d, d_att),
            wv: glorot(rng, d, d_att),
            wo: glorot(rng, d_att, d),
        }
    }

    fn scale(&self) -> S {
        S::one() / S::lit(self.wq.cols() as f64).sqrt()
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, AttentionCache<S>)> {
        if x.rank() != 2 || x.cols() != self.wq.rows() {
            return Err(dim_err(format!(
                "attention of width {} got input {:?}",
                self.wq.rows(),
                x.shape()
            )));
        }
        let q = tensor::matmul(x, &self.wq)?;
        let k = tensor::matmul(x, &self.wk)?;
        let v = tensor::matmul(x, &self.wv)?;
        let scores = tensor::matmul(&q, &k.transpose()?)?.scale(self.scale());
        let weights = tensor::softmax_rows(&scores)?;
        let ctx = tensor::matmul(&weights, &v)?;
        let mut out = tensor::matmul(&ctx, &self.wo)?;
        out.add_assign(x)?;
        Ok((
            out,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                weights,
                ctx,
            },
        ))
    }

    pub fn backward(&self, cache: &AttentionCache<S>, g: &Tensor<S>, grads: &mut AttentionLayer<S>) -> Result<Tensor<S>> {
        if g.shape() != cache.x.shape() {
            return Err(crate::Error::State(format!(
                "attention cache {:?} does not match upstream gradient {:?}",
                cache.x.shape(),
                g.shape()
            )));
        }
        let mut dx = g.clone();
        let mut dctx = cache.ctx.zeros_like();
        tensor::matmul_backward_acc(&cache.ctx, &self.wo, g, Some(&mut dctx), Some(&mut grads.wo))?;
        let mut dweights = cache.weights.zeros_like();
        let mut dv = cache.v.zeros_like();
        tensor::matmul_backward_acc(&cache.weights, &cache.v, &dctx, Some(&mut dweights), Some(&mut dv))?;
        let dscores = tensor::softmax_backward(&cache.weights, &dweights)?.scale(self.scale());
        // scores = q·kᵀ: dq = dscores·k, dk = dscoresᵀ·q
        let dq = tensor::matmul(&dscores, &cache.k)?;
        let dk = tensor::matmul(&dscores.transpose()?, &cache.q)?;
        tensor::matmul_backward_acc(&cache.x, &self.wq, &dq, Some(&mut dx), Some(&mut grads.wq))?;
        tensor::matmul_backward_acc(&cache.x, &self.wk, &dk, Some(&mut dx), Some(&mut grads.wk))?;
        tensor::matmul_backward_acc(&cache.x, &self.wv, &dv, Some(&mut dx), Some(&mut grads.wv))?;
        Ok(dx)
    }
}

impl<S: Scalar> Parameters<S> for AttentionLayer<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(join(prefix, "wq"), &self.wq);
        f(join(prefix, "wk"), &self.wk);
        f(join(prefix, "wv"), &self.wv);
        f(join(prefix, "wo"), &self.wo);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "wq"), &mut self.wq);
        f(join(prefix, "wk"), &mut self.wk);
        f(join(prefix, "wv"), &mut self.wv);
        f(join(prefix, "wo"), &mut self.wo);
    }
}
