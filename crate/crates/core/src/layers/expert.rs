use rand::Rng;

use super::{join, Linear, Parameters};
use crate::error::{dim_err, Result};
use crate::flops::{self, FlopCategory};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Two-layer ReLU feed-forward expert: `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert<S: Scalar = f64> {
    pub up: Linear<S>,
    pub down: Linear<S>,
}

#[derive(Clone, Debug)]
pub struct ExpertCache<S: Scalar = f64> {
    input: Tensor<S>,
    pre_act: Tensor<S>,
    hidden: Tensor<S>,
}

impl<S: Scalar> Expert<S> {
    pub fn new(w1: Tensor<S>, b1: Tensor<S>, w2: Tensor<S>, b2: Tensor<S>) -> Result<Self> {
        let up = Linear::new(w1, Some(b1))?;
        let down = Linear::new(w2, Some(b2))?;
        if up.d_out() != down.d_in() {
            return Err(dim_err(format!(
                "expert hidden sizes disagree: w1 {:?}, w2 {:?}",
                up.weight.shape(),
                down.weight.shape()
            )));
        }
        Ok(Expert { up, down })
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Expert {
            up: Linear::init(rng, d_in, d_hidden, true),
            down: Linear::init(rng, d_hidden, d_out, true),
        }
    }

    pub fn d_in(&self) -> usize {
        self.up.d_in()
    }

    pub fn d_hidden(&self) -> usize {
        self.up.d_out()
    }

    pub fn d_out(&self) -> usize {
        self.down.d_out()
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, ExpertCache<S>)> {
        flops::with_category(FlopCategory::Expert, || {
            let pre_act = self.up.forward(x)?;
            let hidden = tensor::relu(&pre_act);
            let out = self.down.forward(&hidden)?;
            Ok((
                out,
                ExpertCache {
                    input: x.clone(),
                    pre_act,
                    hidden,
                },
            ))
        })
    }

    pub fn backward(&self, cache: &ExpertCache<S>, g: &Tensor<S>, grads: &mut Expert<S>) -> Result<Tensor<S>> {
        if g.shape() != [cache.input.rows(), self.d_out()] {
            return Err(crate::Error::State(format!(
                "expert cache holds {} rows but upstream gradient has shape {:?}",
                cache.input.rows(),
                g.shape()
            )));
        }
        let dh = self.down.backward(&cache.hidden, g, &mut grads.down)?;
        let dpre = tensor::relu_backward(&cache.pre_act, &dh)?;
        self.up.backward(&cache.input, &dpre, &mut grads.up)
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.up.weight.shape() != other.up.weight.shape() || self.down.weight.shape() != other.down.weight.shape() {
            return Err(dim_err("experts in one layer must share shapes"));
        }
        Ok(())
    }
}

impl<S: Scalar> Parameters<S> for Expert<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}
