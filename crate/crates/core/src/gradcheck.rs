//! Central finite-difference gradient checking.
//!
//! Works purely by re-evaluating a scalar loss, so it is independent of the
//! analytic backward passes it is used to audit.

use crate::layers::Parameters;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Entries whose gradients are both below this magnitude are compared absolutely.
const ABS_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central difference of `loss` at every coordinate of `x` (or a strided subset).
pub fn numeric_grad(x: &Tensor, eps: f64, stride: usize, loss: impl Fn(&Tensor) -> f64) -> Vec<(usize, f64)> {
    let mut probe = x.clone();
    let mut out = Vec::new();
    for i in (0..x.len()).step_by(stride.max(1)) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = loss(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = loss(&probe);
        probe.data_mut()[i] = orig;
        out.push((i, (up - down) / (2.0 * eps)));
    }
    out
}

/// Compares an analytic input gradient against central differences.
pub fn check_tensor(
    name: &str,
    x: &Tensor,
    analytic: &Tensor,
    eps: f64,
    loss: impl Fn(&Tensor) -> f64,
) -> GradCheck {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape for {name}");
    let numeric = numeric_grad(x, eps, 1, loss);
    let max_rel_err = numeric
        .iter()
        .map(|&(i, n)| relative_error(analytic.data()[i], n))
        .fold(0.0, f64::max);
    GradCheck {
        name: name.to_string(),
        checked: numeric.len(),
        max_rel_err,
    }
}

/// Checks every parameter tensor of `params` against the gradients in `analytic`.
///
/// `max_per_tensor` caps the number of probed coordinates per tensor (evenly
/// strided) to keep large models affordable.
pub fn check_params<P>(
    params: &P,
    analytic: &P,
    eps: f64,
    max_per_tensor: usize,
    loss: impl Fn(&P) -> f64,
) -> Vec<GradCheck>
where
    P: Parameters<f64> + Clone,
{
    let mut analytic_flat: Vec<(String, Tensor)> = Vec::new();
    analytic.visit("", &mut |name, t| analytic_flat.push((name, t.clone())));
    let mut originals: Vec<Tensor> = Vec::new();
    params.visit("", &mut |_, t| originals.push(t.clone()));
    let mut reports = Vec::new();
    let mut probe = params.clone();
    for (tensor_idx, (name, grad)) in analytic_flat.iter().enumerate() {
        let n = grad.len();
        let stride = n.div_ceil(max_per_tensor.max(1)).max(1);
        let mut max_rel_err: f64 = 0.0;
        let mut checked = 0;
        for i in (0..n).step_by(stride) {
            let orig = originals[tensor_idx].data()[i];
            let set = |p: &mut P, value: f64| {
                let mut k = 0;
                p.visit_mut("", &mut |_, t| {
                    if k == tensor_idx {
                        t.data_mut()[i] = value;
                    }
                    k += 1;
                });
            };
            set(&mut probe, orig + eps);
            let up = loss(&probe);
            set(&mut probe, orig - eps);
            let down = loss(&probe);
            set(&mut probe, orig);
            let numeric = (up - down) / (2.0 * eps);
            max_rel_err = max_rel_err.max(relative_error(grad.data()[i], numeric));
            checked += 1;
        }
        reports.push(GradCheck {
            name: name.clone(),
            checked,
            max_rel_err,
        });
    }
    reports
}

/// Weighted sum `Σ w ⊙ t`: turns a tensor-valued output into a scalar probe loss.
pub fn probe(t: &Tensor, w: &Tensor) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}
