//! Finite-difference validation of backward rules.

use super::{backward, Tensor};

const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per input tensor, in argument order.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    /// Set when a NaN/Inf appeared anywhere during the check.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_err < tol
    }
}

/// Compares the reverse-mode gradient of a scalar-valued function against
/// central finite differences on every input element.
pub fn grad_check(f: &dyn Fn(&[Tensor]) -> Tensor, inputs: &[Tensor]) -> GradCheckReport {
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.requires_grad()).collect();
    let loss = f(&leaves);
    if !loss.all_finite() {
        return GradCheckReport {
            per_input: vec![f64::INFINITY; inputs.len()],
            max_rel_err: f64::INFINITY,
            failure: Some("non-finite loss in forward pass".into()),
        };
    }
    let grads = backward(&loss);

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut failure = None;
    for (arg, leaf) in leaves.iter().enumerate() {
        let analytic = grads.grad_or_zeros(leaf);
        let mut worst = 0.0f64;
        for i in 0..leaf.len() {
            let eval = |delta: f64| -> f64 {
                let perturbed: Vec<Tensor> = leaves
                    .iter()
                    .enumerate()
                    .map(|(a, t)| {
                        if a == arg {
                            let mut d = t.data().to_vec();
                            d[i] += delta;
                            Tensor::from_vec(t.shape(), d)
                        } else {
                            t.detach()
                        }
                    })
                    .collect();
                f(&perturbed).item()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            if !numeric.is_finite() || !analytic[i].is_finite() {
                failure = Some(format!(
                    "non-finite gradient for input {arg} element {i} (autodiff {}, finite-diff {numeric})",
                    analytic[i]
                ));
                worst = f64::INFINITY;
                continue;
            }
            let rel = (analytic[i] - numeric).abs()
                / analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        per_input,
        max_rel_err,
        failure,
    }
}
