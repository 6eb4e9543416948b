use super::{join, Parameters};
use crate::error::{dim_err, Result};
use crate::flops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bidirectional tap-delay memory block with a residual connection:
/// `out[t] = in[t] + Σ_{τ=−order..order} taps[τ] ⊙ in[t+τ]`, zero-padded at the edges.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryLayer<S: Scalar = f64> {
    /// `(2·order+1)×d`; row `τ + order` holds the coefficients for offset `τ`.
    pub taps: Tensor<S>,
    pub order: usize,
}

impl<S: Scalar> MemoryLayer<S> {
    pub fn new(taps: Tensor<S>, order: usize) -> Result<Self> {
        if taps.rank() != 2 || taps.rows() != 2 * order + 1 {
            return Err(dim_err(format!(
                "taps {:?} do not match order {order} (need {} rows)",
                taps.shape(),
                2 * order + 1
            )));
        }
        Ok(MemoryLayer { taps, order })
    }

    /// Zero taps: the layer starts as the identity.
    pub fn identity(order: usize, d: usize) -> Self {
        MemoryLayer {
            taps: Tensor::zeros(&[2 * order + 1, d]),
            order,
        }
    }

    pub fn dim(&self) -> usize {
        self.taps.cols()
    }

    fn check_input(&self, seq: &Tensor<S>) -> Result<()> {
        if seq.rank() != 2 || seq.cols() != self.dim() {
            return Err(dim_err(format!(
                "memory layer of width {} got input {:?}",
                self.dim(),
                seq.shape()
            )));
        }
        Ok(())
    }

    /// Offsets `τ` with `0 ≤ t+τ < len`, paired with their tap row.
    fn window(&self, t: usize, len: usize) -> impl Iterator<Item = (usize, usize)> {
        let order = self.order as isize;
        (-order..=order).filter_map(move |tau| {
            let src = t as isize + tau;
            (0..len as isize)
                .contains(&src)
                .then_some(((tau + order) as usize, src as usize))
        })
    }

    pub fn forward(&self, seq: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(seq)?;
        let len = seq.rows();
        let mut out = seq.clone();
        for t in 0..len {
            for (k, src) in self.window(t, len) {
                let tap = self.taps.row(k);
                let input = seq.row(src).to_vec();
                out.row_mut(t)
                    .iter_mut()
                    .zip(tap.iter().zip(&input))
                    .for_each(|(o, (&c, &x))| *o += c * x);
            }
        }
        // charged as if zero-padded
        flops::record_macs(len * self.taps.len());
        Ok(out)
    }

    pub fn backward(&self, seq: &Tensor<S>, g: &Tensor<S>, grads: &mut MemoryLayer<S>) -> Result<Tensor<S>> {
        self.check_input(seq)?;
        if g.shape() != seq.shape() {
            return Err(crate::Error::State(format!(
                "memory cache {:?} does not match upstream gradient {:?}",
                seq.shape(),
                g.shape()
            )));
        }
        let len = seq.rows();
        let d = self.dim();
        let mut dx = g.clone();
        for t in 0..len {
            let gt = g.row(t);
            for (k, src) in self.window(t, len) {
                let tap = self.taps.row(k);
                let xin = seq.row(src);
                let gtap = &mut grads.taps.data_mut()[k * d..(k + 1) * d];
                for j in 0..d {
                    gtap[j] += gt[j] * xin[j];
                }
                let dsrc = dx.row_mut(src);
                for j in 0..d {
                    dsrc[j] += tap[j] * gt[j];
                }
            }
        }
        Ok(dx)
    }
}

impl<S: Scalar> Parameters<S> for MemoryLayer<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(join(prefix, "taps"), &self.taps);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "taps"), &mut self.taps);
    }
}
