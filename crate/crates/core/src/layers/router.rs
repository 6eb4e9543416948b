use rand::Rng;

use super::{glorot, join, Parameters};
use crate::config::RouterVariant;
use crate::error::{dim_err, Error, Result};
use crate::flops::{self, FlopCategory};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Linear router producing a distribution over experts from the concatenation
/// `[e_c; e_a; e_d; o_prev]` (augmented) or `[e_c; o_prev]` (baseline).
#[derive(Clone, Debug, PartialEq)]
pub struct Router<S: Scalar = f64> {
    pub weight: Tensor<S>,
    pub variant: RouterVariant,
}

/// Routing outcome for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision<S: Scalar = f64> {
    pub probs: Tensor<S>,
    pub selected: usize,
    pub gate: S,
}

/// Index of the largest value; the lowest index wins exact ties.
pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> Router<S> {
    pub fn new(weight: Tensor<S>, variant: RouterVariant) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(dim_err(format!("router weight must be a matrix, got {:?}", weight.shape())));
        }
        Ok(Router { weight, variant })
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_route: usize, n_experts: usize, variant: RouterVariant) -> Self {
        Router {
            weight: glorot(rng, d_route, n_experts),
            variant,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_route(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Builds the router input for one frame.
    pub fn input(&self, e_c: &[S], e_a: Option<&[S]>, e_d: Option<&[S]>, o_prev: &[S]) -> Result<Vec<S>> {
        let mut v = Vec::with_capacity(self.d_route());
        v.extend_from_slice(e_c);
        match (self.variant, e_a, e_d) {
            (RouterVariant::Moe2, Some(a), Some(d)) => {
                v.extend_from_slice(a);
                v.extend_from_slice(d);
            }
            (RouterVariant::Moe2, _, _) => {
                return Err(Error::Config(
                    "augmented router requires both accent and domain embeddings".into(),
                ))
            }
            (RouterVariant::Moe1, None, None) => {}
            (RouterVariant::Moe1, _, _) => {
                return Err(Error::Config(
                    "baseline router does not take accent or domain embeddings".into(),
                ))
            }
        }
        v.extend_from_slice(o_prev);
        if v.len() != self.d_route() {
            return Err(dim_err(format!(
                "router input has {} features, weight expects {}",
                v.len(),
                self.d_route()
            )));
        }
        Ok(v)
    }

    /// Routes a frame from its pre-built input vector.
    pub fn decide(&self, input: &[S]) -> Result<RouterDecision<S>> {
        flops::with_category(FlopCategory::Router, || {
            let logits = tensor::vecmat(input, &self.weight)?;
            let probs = tensor::softmax(&logits)?;
            let selected = argmax(probs.data());
            let gate = probs.data()[selected];
            Ok(RouterDecision { probs, selected, gate })
        })
    }

    pub fn route(&self, e_c: &[S], e_a: Option<&[S]>, e_d: Option<&[S]>, o_prev: &[S]) -> Result<RouterDecision<S>> {
        self.decide(&self.input(e_c, e_a, e_d, o_prev)?)
    }

    /// Backward for one frame: accumulates into `grads.weight` and returns `∂/∂input`.
    pub fn backward_frame(
        &self,
        input: &[S],
        probs: &[S],
        dprobs: &[S],
        grads: &mut Router<S>,
    ) -> Result<Vec<S>> {
        let n = self.n_experts();
        if probs.len() != n || dprobs.len() != n || input.len() != self.d_route() {
            return Err(dim_err("router backward: cached frame does not match router"));
        }
        let mut dlogits = vec![S::zero(); n];
        tensor::softmax_backward_slice(probs, dprobs, &mut dlogits);
        let w = self.weight.data();
        let gw = grads.weight.data_mut();
        let mut dinput = vec![S::zero(); input.len()];
        for (p, (&x, di)) in input.iter().zip(dinput.iter_mut()).enumerate() {
            let wrow = &w[p * n..(p + 1) * n];
            let grow = &mut gw[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for j in 0..n {
                grow[j] += x * dlogits[j];
                acc += wrow[j] * dlogits[j];
            }
            *di = acc;
        }
        Ok(dinput)
    }
}

impl<S: Scalar> Parameters<S> for Router<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(join(prefix, "weight"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "weight"), &mut self.weight);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weight_gives_uniform_and_lowest_index() {
        for n in 1..6 {
            let r = Router::new(Tensor::<f64>::zeros(&[5, n]), RouterVariant::Moe1).unwrap();
            let d = r.route(&[1.0, 2.0], None, None, &[0.5, -1.0, 3.0]).unwrap();
            assert_eq!(d.selected, 0);
            for &p in d.probs.data() {
                assert!((p - 1.0 / n as f64).abs() < 1e-15);
            }
            assert_eq!(d.gate, d.probs.data()[0]);
        }
    }

    #[test]
    fn crafted_logits() {
        // input [1], weight row [5, -5] -> logits [5, -5]
        let r = Router::new(Tensor::matrix(2, 2, vec![5.0, -5.0, 0.0, 0.0]).unwrap(), RouterVariant::Moe1).unwrap();
        let d = r.route(&[1.0], None, None, &[0.0]).unwrap();
        let expected = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((d.probs.data()[0] - expected).abs() < 1e-15);
        // 0.99995 to five significant digits
        assert!((d.probs.data()[0] - 0.99995).abs() < 5e-6);
        assert_eq!(d.selected, 0);
    }

    #[test]
    fn permuting_columns_permutes_decision() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r: Router = Router::init(&mut rng, 6, 4, RouterVariant::Moe2);
        let perm = [2usize, 0, 3, 1];
        let mut w = Tensor::<f64>::zeros(&[6, 4]);
        for p in 0..6 {
            for (j, &src) in perm.iter().enumerate() {
                w.data_mut()[p * 4 + j] = r.weight.get2(p, src);
            }
        }
        let rp = Router::new(w, RouterVariant::Moe2).unwrap();
        let (ec, ea, ed, o) = ([0.3, -1.2], [0.7], [1.1], [-0.4, 0.9]);
        let d = r.route(&ec, Some(&ea), Some(&ed), &o).unwrap();
        let dp = rp.route(&ec, Some(&ea), Some(&ed), &o).unwrap();
        for (j, &src) in perm.iter().enumerate() {
            assert_eq!(dp.probs.data()[j], d.probs.data()[src]);
        }
        assert_eq!(perm[dp.selected], d.selected);
    }

    #[test]
    fn variant_mismatch_is_a_config_error() {
        let r = Router::new(Tensor::<f64>::zeros(&[4, 2]), RouterVariant::Moe2).unwrap();
        assert!(matches!(r.route(&[1.0], None, None, &[1.0]), Err(Error::Config(_))));
        let r = Router::new(Tensor::<f64>::zeros(&[4, 2]), RouterVariant::Moe1).unwrap();
        assert!(matches!(r.route(&[1.0], Some(&[1.0]), Some(&[1.0]), &[1.0]), Err(Error::Config(_))));
        assert!(matches!(r.route(&[1.0], None, None, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
