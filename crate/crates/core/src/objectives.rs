//! Loss functions: flow matching, semantic delta consistency with patch
//! weighting, and the combined objective.

use crate::adapter::{SemanticDelta, LN_EPS};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::vision::{unpatchify, FrozenEncoder, Image};

pub const COSINE_EPS: f64 = 1e-8;

/// Scalar view of one training step's objective.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossBreakdown {
    pub flow: f64,
    pub sdc: f64,
    pub total: f64,
    pub lambda_sdc: f64,
}

/// Mean squared error of the predicted velocity against the constant target
/// velocity `z1 − z0`.
pub fn flow_loss(v_hat: &Tensor, z0: &Tensor, z1: &Tensor) -> Tensor {
    v_hat.sub(&z1.sub(z0)).square().mean()
}

/// Patch-weighted cosine distance
/// `1 − (1/L)·Σ_ℓ m^(ℓ)·cos(Δ^(ℓ), Δ̂^(ℓ))`,
/// with weights taken from the ground-truth delta only. Zero-norm tokens on
/// either side contribute cos = 0 through the eps-guarded denominator.
pub fn sdc_loss(gt: &SemanticDelta, pred_delta: &Tensor) -> Tensor {
    let l = gt.delta.rows();
    assert_eq!(
        pred_delta.shape(),
        gt.delta.shape(),
        "predicted delta {:?} does not match ground truth {:?}",
        pred_delta.shape(),
        gt.delta.shape()
    );
    let weights = Tensor::from_vec(&[l], gt.weights.clone());
    let cos = pred_delta.cosine_last(&gt.delta.detach(), COSINE_EPS);
    weights
        .mul(&cos)
        .sum()
        .mul_scalar(-1.0 / l as f64)
        .add_scalar(1.0)
}

/// Delta induced by the model's current clean-latent estimate:
/// decode `ẑ0` (unclamped), re-encode, and difference against the source
/// features the same way the extractor does. Differentiable w.r.t. `ẑ0`.
pub fn pred_delta(
    source: &Image,
    z0_hat: &Tensor,
    enc: &FrozenEncoder,
    use_layernorm: bool,
) -> Result<Tensor> {
    let decoded = unpatchify(z0_hat, enc.cfg.h, enc.cfg.w, enc.cfg.patch)?;
    let f_pred = enc.encode_tensor(&decoded)?;
    let f_src = enc.encode(source)?;
    Ok(if use_layernorm {
        f_pred
            .tokens
            .layer_norm(LN_EPS)
            .sub(&f_src.tokens.layer_norm(LN_EPS))
    } else {
        f_pred.tokens.sub(&f_src.tokens)
    })
}

/// `total = flow + λ_sdc·sdc`. With λ_sdc = 0 the flow term is returned
/// untouched so gradients match the flow-only objective bitwise.
pub fn total_loss(flow: &Tensor, sdc: &Tensor, lambda_sdc: f64) -> Tensor {
    if lambda_sdc == 0.0 {
        flow.clone()
    } else {
        flow.add(&sdc.mul_scalar(lambda_sdc))
    }
}

impl LossBreakdown {
    pub fn new(flow: f64, sdc: f64, lambda_sdc: f64) -> LossBreakdown {
        LossBreakdown {
            flow,
            sdc,
            total: flow + lambda_sdc * sdc,
            lambda_sdc,
        }
    }
}

#[cfg(test)]
mod tests;
