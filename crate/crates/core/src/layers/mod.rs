//! Network building blocks with explicit forward caches and hand-written backward passes.
//!
//! Every layer follows the same pattern: `forward` returns the output together
//! with a cache value, and `backward` takes that cache plus the upstream
//! gradient, accumulates parameter gradients into a zeroed copy of the layer
//! (see [`Parameters::zeroed`]) and returns the input gradient.

mod attention;
mod expert;
mod memory;
mod moe;
mod router;

pub use attention::{AttentionCache, AttentionLayer};
pub use expert::{Expert, ExpertCache};
pub use memory::MemoryLayer;
pub use moe::{MoeCache, MoeGrads, MoeLayer, RouterContext};
pub(crate) use moe::{gate_grads, gate_outputs};
pub use router::{argmax, Router, RouterDecision};

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Uniform Glorot initialization: `U(−r, r)` with `r = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<S: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor<S> {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::lit(rng.random_range(-r..r)))
        .collect();
    Tensor::matrix(rows, cols, data).expect("glorot shape")
}

/// Named parameter traversal. Names are stable and used by checkpoints.
pub trait Parameters<S: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>));

    /// Copy of `self` with every parameter set to zero; used as a gradient accumulator.
    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|x| *x = S::zero()));
        z
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map applied row-wise: `x · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S: Scalar = f64> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(weight: Tensor<S>, bias: Option<Tensor<S>>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(dim_err(format!("linear weight must be a matrix, got {:?}", weight.shape())));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[1]] {
                return Err(dim_err(format!(
                    "bias {:?} does not match weight {:?}",
                    b.shape(),
                    weight.shape()
                )));
            }
        }
        Ok(Linear { weight, bias })
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize, with_bias: bool) -> Self {
        Linear {
            weight: glorot(rng, d_in, d_out),
            bias: with_bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut y = tensor::matmul(x, &self.weight)?;
        if let Some(b) = &self.bias {
            tensor::add_row_bias(&mut y, b)?;
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grads` and returns `∂/∂x`.
    pub fn backward(&self, x: &Tensor<S>, g: &Tensor<S>, grads: &mut Linear<S>) -> Result<Tensor<S>> {
        let mut dx = x.zeros_like();
        tensor::matmul_backward_acc(x, &self.weight, g, Some(&mut dx), Some(&mut grads.weight))?;
        if let Some(gb) = &mut grads.bias {
            tensor::row_bias_backward(g, gb)?;
        }
        Ok(dx)
    }

    /// Backward for parameters only.
    pub fn backward_params(&self, x: &Tensor<S>, g: &Tensor<S>, grads: &mut Linear<S>) -> Result<()> {
        tensor::matmul_backward_acc(x, &self.weight, g, None, Some(&mut grads.weight))?;
        if let Some(gb) = &mut grads.bias {
            tensor::row_bias_backward(g, gb)?;
        }
        Ok(())
    }
}

impl<S: Scalar> Parameters<S> for Linear<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}
