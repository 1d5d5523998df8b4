//! Semantic delta extraction, gated residual refinement, Perceiver
//! resampling and per-token projection into edit tokens.
//!
//! The conditioning signal is the token-wise difference of layer-normalized
//! patch features, `Δ = LN(f_a') − LN(f_a)`, refined through
//! `Δ̃ = Δ + tanh(g)·Linear(Δ)` and summarized by N learnable queries into a
//! fixed-length edit representation, each token then mapped by its own
//! affine projection. Each mechanism can be ablated independently.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::vision::PatchFeatures;

// Small enough that rescaling features by 0.1..10 moves the normalized
// delta by well under 1e-6.
pub const LN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdapterConfig {
    pub d_r: usize,
    pub d_c: usize,
    pub n_queries: usize,
    pub resampler_depth: usize,
    /// Ablation switches; `full` keeps all of them on.
    pub use_layernorm: bool,
    pub use_gated_residual: bool,
    /// `false` swaps the resampler for mean-pooling + MLP.
    pub use_perceiver: bool,
    pub per_token_projection: bool,
    /// `false` conditions on the concatenated LN feature pair instead of the
    /// delta.
    pub use_semantic_delta: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            d_r: 32,
            d_c: 64,
            n_queries: 8,
            resampler_depth: 1,
            use_layernorm: true,
            use_gated_residual: true,
            use_perceiver: true,
            per_token_projection: true,
            use_semantic_delta: true,
        }
    }
}

impl AdapterConfig {
    /// Parameter count of the projection stage under this config.
    pub fn projection_param_count(&self) -> usize {
        let per = self.d_r * self.d_c + self.d_c;
        if self.per_token_projection {
            self.n_queries * per
        } else {
            per
        }
    }
}

/// Token-level encoding of one visual transformation.
#[derive(Debug, Clone)]
pub struct SemanticDelta {
    /// `L × D_r`, pre-refinement.
    pub delta: Tensor,
    /// Set by [`gated_refine`].
    pub refined: Option<Tensor>,
    /// Patch weights `m ∈ [0,1]^L`, always computed from the raw delta.
    pub weights: Vec<f64>,
}

impl SemanticDelta {
    pub fn refined_or_raw(&self) -> &Tensor {
        self.refined.as_ref().unwrap_or(&self.delta)
    }
}

struct ResamplerBlock {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    mlp_w1: Tensor,
    mlp_b1: Tensor,
    mlp_w2: Tensor,
    mlp_b2: Tensor,
}

pub struct AdapterParams {
    pub cfg: AdapterConfig,
    /// Scalar gate, passed through tanh before use. Zero-initialized.
    pub gate: Tensor,
    pub residual_w: Tensor, // D_r × D_r, shared across tokens
    pub residual_b: Tensor, // D_r
    pub queries: Tensor,    // N × D_r
    blocks: Vec<ResamplerBlock>,
    // pooling-MLP path (only allocated for the ablation variant)
    pool_w1: Option<Tensor>,
    pool_b1: Option<Tensor>,
    pool_w2: Option<Tensor>,
    pool_b2: Option<Tensor>,
    /// One (W_i, b_i) pair per query, or a single shared pair.
    proj_w: Vec<Tensor>,
    proj_b: Vec<Tensor>,
}

fn param(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data: Vec<f64> = rng.normal_vec(rows * cols).iter().map(|v| v * scale).collect();
    Tensor::param(&[rows, cols], data)
}

impl AdapterParams {
    pub fn init(cfg: AdapterConfig, rng: &mut SeededRng) -> AdapterParams {
        let dr = cfg.d_r;
        let s = 1.0 / (dr as f64).sqrt();
        let blocks = (0..cfg.resampler_depth)
            .map(|_| ResamplerBlock {
                wq: param(rng, dr, dr, s),
                wk: param(rng, dr, dr, s),
                wv: param(rng, dr, dr, s),
                wo: param(rng, dr, dr, s),
                mlp_w1: param(rng, dr, 2 * dr, s),
                mlp_b1: Tensor::param(&[2 * dr], vec![0.0; 2 * dr]),
                mlp_w2: param(rng, 2 * dr, dr, 1.0 / (2.0 * dr as f64).sqrt()),
                mlp_b2: Tensor::param(&[dr], vec![0.0; dr]),
            })
            .collect();
        let (pool_w1, pool_b1, pool_w2, pool_b2) = if cfg.use_perceiver {
            (None, None, None, None)
        } else {
            (
                Some(param(rng, dr, 2 * dr, s)),
                Some(Tensor::param(&[2 * dr], vec![0.0; 2 * dr])),
                Some(param(rng, 2 * dr, dr, 1.0 / (2.0 * dr as f64).sqrt())),
                Some(Tensor::param(&[dr], vec![0.0; dr])),
            )
        };
        let pairs = if cfg.per_token_projection { cfg.n_queries } else { 1 };
        let proj_w = (0..pairs).map(|_| param(rng, dr, cfg.d_c, s)).collect();
        let proj_b = (0..pairs)
            .map(|_| Tensor::param(&[cfg.d_c], vec![0.0; cfg.d_c]))
            .collect();
        AdapterParams {
            gate: Tensor::param(&[1], vec![0.0]),
            residual_w: param(rng, dr, dr, s),
            residual_b: Tensor::param(&[dr], vec![0.0; dr]),
            queries: param(rng, cfg.n_queries, dr, 1.0),
            blocks,
            pool_w1,
            pool_b1,
            pool_w2,
            pool_b2,
            proj_w,
            proj_b,
            cfg,
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("adapter.gate", &self.gate);
        f("adapter.residual_w", &self.residual_w);
        f("adapter.residual_b", &self.residual_b);
        f("adapter.queries", &self.queries);
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in [
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("mlp_w1", &b.mlp_w1),
                ("mlp_b1", &b.mlp_b1),
                ("mlp_w2", &b.mlp_w2),
                ("mlp_b2", &b.mlp_b2),
            ] {
                f(&format!("adapter.resampler.{i}.{n}"), t);
            }
        }
        for (n, t) in [
            ("pool_w1", &self.pool_w1),
            ("pool_b1", &self.pool_b1),
            ("pool_w2", &self.pool_w2),
            ("pool_b2", &self.pool_b2),
        ] {
            if let Some(t) = t {
                f(&format!("adapter.{n}"), t);
            }
        }
        for (i, t) in self.proj_w.iter().enumerate() {
            f(&format!("adapter.proj_w.{i}"), t);
        }
        for (i, t) in self.proj_b.iter().enumerate() {
            f(&format!("adapter.proj_b.{i}"), t);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("adapter.gate", &mut self.gate);
        f("adapter.residual_w", &mut self.residual_w);
        f("adapter.residual_b", &mut self.residual_b);
        f("adapter.queries", &mut self.queries);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, t) in [
                ("wq", &mut b.wq),
                ("wk", &mut b.wk),
                ("wv", &mut b.wv),
                ("wo", &mut b.wo),
                ("mlp_w1", &mut b.mlp_w1),
                ("mlp_b1", &mut b.mlp_b1),
                ("mlp_w2", &mut b.mlp_w2),
                ("mlp_b2", &mut b.mlp_b2),
            ] {
                f(&format!("adapter.resampler.{i}.{n}"), t);
            }
        }
        for (n, t) in [
            ("pool_w1", &mut self.pool_w1),
            ("pool_b1", &mut self.pool_b1),
            ("pool_w2", &mut self.pool_w2),
            ("pool_b2", &mut self.pool_b2),
        ] {
            if let Some(t) = t.as_mut() {
                f(&format!("adapter.{n}"), t);
            }
        }
        for (i, t) in self.proj_w.iter_mut().enumerate() {
            f(&format!("adapter.proj_w.{i}"), t);
        }
        for (i, t) in self.proj_b.iter_mut().enumerate() {
            f(&format!("adapter.proj_b.{i}"), t);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }
}

/// `Δ = LN(f_a') − LN(f_a)` with patch weights `m^(ℓ) = ‖Δ^(ℓ)‖ / max_j ‖Δ^(j)‖`.
/// A zero delta yields all-zero weights.
pub fn semantic_delta(
    f_a: &PatchFeatures,
    f_a2: &PatchFeatures,
    cfg: &AdapterConfig,
) -> Result<SemanticDelta> {
    f_a.check_compatible(f_a2)?;
    if f_a.tokens.shape() != f_a2.tokens.shape() {
        return Err(Error::Incompatible(format!(
            "feature shapes differ: {:?} vs {:?}",
            f_a.tokens.shape(),
            f_a2.tokens.shape()
        )));
    }
    let delta = if cfg.use_layernorm {
        f_a2.tokens.layer_norm(LN_EPS).sub(&f_a.tokens.layer_norm(LN_EPS))
    } else {
        f_a2.tokens.sub(&f_a.tokens)
    };
    let weights = patch_weights(&delta);
    Ok(SemanticDelta {
        delta,
        refined: None,
        weights,
    })
}

pub fn patch_weights(delta: &Tensor) -> Vec<f64> {
    let (l, d) = (delta.rows(), delta.cols());
    let norms: Vec<f64> = (0..l)
        .map(|t| {
            delta.data()[t * d..(t + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        vec![0.0; l]
    } else {
        norms.into_iter().map(|n| n / max).collect()
    }
}

/// `Δ̃ = Δ + tanh(g)·(Δ·W + b)`. Identity (bitwise) at gate zero. Patch
/// weights are not recomputed from the refined delta.
pub fn gated_refine(d: &SemanticDelta, p: &AdapterParams) -> SemanticDelta {
    let refined = if !p.cfg.use_gated_residual || p.gate.item().tanh() == 0.0 {
        d.delta.clone()
    } else {
        let lin = d.delta.matmul(&p.residual_w).add(&p.residual_b);
        d.delta.add(&lin.mul(&p.gate.tanh()))
    };
    SemanticDelta {
        delta: d.delta.clone(),
        refined: Some(refined),
        weights: d.weights.clone(),
    }
}

/// Fixed-length resampling: N queries cross-attend to the refined token
/// sequence (pre-normalized queries and keys), one residual MLP per block.
/// The pooling-MLP ablation collapses tokens by mean instead.
pub fn resample(d: &SemanticDelta, p: &AdapterParams) -> Tensor {
    let tokens = d.refined_or_raw();
    if !p.cfg.use_perceiver {
        let pooled = tokens.mean_rows().reshape(&[1, p.cfg.d_r]);
        let h = pooled
            .matmul(p.pool_w1.as_ref().expect("pooling params"))
            .add(p.pool_b1.as_ref().unwrap())
            .tanh();
        let out = h
            .matmul(p.pool_w2.as_ref().unwrap())
            .add(p.pool_b2.as_ref().unwrap());
        return Tensor::concat_rows(&vec![out; p.cfg.n_queries]);
    }
    let scale = 1.0 / (p.cfg.d_r as f64).sqrt();
    let mut r = p.queries.clone();
    for b in &p.blocks {
        let q = r.layer_norm(LN_EPS).matmul(&b.wq);
        let k = tokens.layer_norm(LN_EPS).matmul(&b.wk);
        let v = tokens.matmul(&b.wv);
        let attn = q
            .matmul(&k.transpose())
            .mul_scalar(scale)
            .softmax(1)
            .matmul(&v)
            .matmul(&b.wo);
        r = r.add(&attn);
        let h = r.layer_norm(LN_EPS).matmul(&b.mlp_w1).add(&b.mlp_b1).tanh();
        r = r.add(&h.matmul(&b.mlp_w2).add(&b.mlp_b2));
    }
    r
}

/// `e_i = W_i r_i + b_i`, no weight sharing across i (unless ablated).
pub fn per_token_project(r: &Tensor, p: &AdapterParams) -> Tensor {
    assert_eq!(
        r.rows(),
        p.cfg.n_queries,
        "resampled tokens {:?} do not match {} queries",
        r.shape(),
        p.cfg.n_queries
    );
    if !p.cfg.per_token_projection {
        return r.matmul(&p.proj_w[0]).add(&p.proj_b[0]);
    }
    let rows: Vec<Tensor> = (0..p.cfg.n_queries)
        .map(|i| {
            r.slice_rows(i, i + 1)
                .matmul(&p.proj_w[i])
                .add(&p.proj_b[i])
        })
        .collect();
    Tensor::concat_rows(&rows)
}

/// Full conditioning path: features → delta → refinement → resampling →
/// projection. Returns the (refined) delta and the `N × D_c` edit tokens.
pub fn edit_tokens(
    p: &AdapterParams,
    f_a: &PatchFeatures,
    f_a2: &PatchFeatures,
) -> Result<(SemanticDelta, Tensor)> {
    let d = semantic_delta(f_a, f_a2, &p.cfg)?;
    if p.cfg.use_semantic_delta {
        let d = gated_refine(&d, p);
        let r = resample(&d, p);
        let e = per_token_project(&r, p);
        Ok((d, e))
    } else {
        // Conditioning on the full pair: concatenated LN features, resampled
        // by the same queries so E keeps its shape.
        let pair = Tensor::concat_rows(&[
            f_a.tokens.layer_norm(LN_EPS),
            f_a2.tokens.layer_norm(LN_EPS),
        ]);
        let carrier = SemanticDelta {
            delta: d.delta.clone(),
            refined: Some(pair),
            weights: d.weights.clone(),
        };
        let r = resample(&carrier, p);
        let e = per_token_project(&r, p);
        Ok((d, e))
    }
}
