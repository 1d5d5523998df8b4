//! Frozen stand-in for the pre-trained patch-level vision encoder, plus the
//! exact image⇄token codec that takes the place of the VAE.
//!
//! The codec is a pure element rearrangement, so it is lossless, bitwise
//! invertible and differentiable. The encoder is a seeded random network:
//! patch embedding + sinusoidal positions + K pre-norm mixing blocks, all
//! generated from one seed and immutable afterwards. Gradients flow through
//! it but never into it.

mod image;

pub use image::{Image, CHANNELS};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub d_r: usize,
    pub mixing_blocks: usize,
    pub seed: u64,
    /// Zeroed in symmetry experiments; positions are additive.
    pub use_positions: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            h: 16,
            w: 16,
            patch: 4,
            d_r: 32,
            mixing_blocks: 1,
            seed: 7,
            use_positions: true,
        }
    }
}

impl EncoderConfig {
    pub fn tokens(&self) -> usize {
        (self.h / self.patch) * (self.w / self.patch)
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    /// Deterministic hash of seed + structural config (FNV-1a).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in [
            self.seed,
            self.h as u64,
            self.w as u64,
            self.patch as u64,
            self.d_r as u64,
            self.mixing_blocks as u64,
            self.use_positions as u64,
        ] {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Patch-token features of one image under a specific frozen encoder.
#[derive(Debug, Clone)]
pub struct PatchFeatures {
    /// `L × D_r`
    pub tokens: Tensor,
    pub fingerprint: u64,
}

impl PatchFeatures {
    pub fn check_compatible(&self, other: &PatchFeatures) -> Result<()> {
        if self.fingerprint != other.fingerprint {
            return Err(Error::Incompatible(format!(
                "encoder fingerprint mismatch: {:#018x} vs {:#018x}",
                self.fingerprint, other.fingerprint
            )));
        }
        Ok(())
    }
}

/// Raster-order index map for token ℓ, inner slot (dy·P + dx)·C + c.
fn patchify_index(h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(h * w * CHANNELS);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..CHANNELS {
                        idx.push(((py * p + dy) * w + (px * p + dx)) * CHANNELS + c);
                    }
                }
            }
        }
    }
    idx
}

fn check_divisible(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible by patch size {p}"
        )));
    }
    Ok(())
}

/// Splits a flat `[H·W·C]` image tensor into `[L, P²C]` patch tokens.
/// Differentiable; exact inverse of [`unpatchify`].
pub fn patchify(img: &Tensor, h: usize, w: usize, p: usize) -> Result<Tensor> {
    check_divisible(h, w, p)?;
    if img.len() != h * w * CHANNELS {
        return Err(Error::Config(format!(
            "image tensor has {} elements, expected {}",
            img.len(),
            h * w * CHANNELS
        )));
    }
    let l = (h / p) * (w / p);
    let d = p * p * CHANNELS;
    Ok(img.gather(&patchify_index(h, w, p), &[l, d]))
}

pub fn patchify_image(img: &Image, p: usize) -> Result<Tensor> {
    patchify(&img.to_tensor(), img.h, img.w, p)
}

/// Reassembles `[L, P²C]` patch tokens into a flat `[H·W·C]` image tensor.
/// Differentiable, unclamped.
pub fn unpatchify(tokens: &Tensor, h: usize, w: usize, p: usize) -> Result<Tensor> {
    check_divisible(h, w, p)?;
    let l = (h / p) * (w / p);
    let d = p * p * CHANNELS;
    if tokens.shape() != [l, d] {
        return Err(Error::Config(format!(
            "token shape {:?} does not match {l} tokens of dim {d}",
            tokens.shape()
        )));
    }
    let fwd = patchify_index(h, w, p);
    let mut inv = vec![0usize; fwd.len()];
    for (token_slot, &img_slot) in fwd.iter().enumerate() {
        inv[img_slot] = token_slot;
    }
    Ok(tokens.gather(&inv, &[h * w * CHANNELS]))
}

struct MixBlock {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    mlp_w1: Tensor,
    mlp_b1: Tensor,
    mlp_w2: Tensor,
    mlp_b2: Tensor,
}

/// Seeded random patch encoder. Weights are plain (non-differentiable)
/// leaves, so a backward pass can traverse them but never assigns gradients.
pub struct FrozenEncoder {
    pub cfg: EncoderConfig,
    patch_embed: Tensor, // P²C × D_r
    pos_table: Tensor,   // L × D_r
    blocks: Vec<MixBlock>,
    fingerprint: u64,
}

fn sinusoidal_table(l: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; l * d];
    for pos in 0..l {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(&[l, d], data)
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data: Vec<f64> = rng.normal_vec(rows * cols).iter().map(|v| v * scale).collect();
    Tensor::from_vec(&[rows, cols], data)
}

impl FrozenEncoder {
    pub fn new(cfg: EncoderConfig) -> FrozenEncoder {
        let mut rng = SeededRng::derive(cfg.seed, 0xE7C0);
        let d = cfg.token_dim();
        let dr = cfg.d_r;
        let l = cfg.tokens();
        let patch_embed = random_matrix(&mut rng, d, dr, 1.0 / (d as f64).sqrt());
        let pos_table = if cfg.use_positions {
            sinusoidal_table(l, dr)
        } else {
            Tensor::zeros(&[l, dr])
        };
        let blocks = (0..cfg.mixing_blocks)
            .map(|_| {
                let s = 1.0 / (dr as f64).sqrt();
                MixBlock {
                    wq: random_matrix(&mut rng, dr, dr, s),
                    wk: random_matrix(&mut rng, dr, dr, s),
                    wv: random_matrix(&mut rng, dr, dr, s),
                    wo: random_matrix(&mut rng, dr, dr, s),
                    mlp_w1: random_matrix(&mut rng, dr, 2 * dr, s),
                    mlp_b1: Tensor::zeros(&[2 * dr]),
                    mlp_w2: random_matrix(&mut rng, 2 * dr, dr, 1.0 / (2.0 * dr as f64).sqrt()),
                    mlp_b2: Tensor::zeros(&[dr]),
                }
            })
            .collect();
        let fingerprint = cfg.fingerprint();
        FrozenEncoder {
            cfg,
            patch_embed,
            pos_table,
            blocks,
            fingerprint,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Byte snapshot of all weights, used by the freeze-contract tests.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |t: &Tensor| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(&self.patch_embed);
        push(&self.pos_table);
        for b in &self.blocks {
            for t in [&b.wq, &b.wk, &b.wv, &b.wo, &b.mlp_w1, &b.mlp_b1, &b.mlp_w2, &b.mlp_b2] {
                push(t);
            }
        }
        out
    }

    /// Patch features for a flat `[H·W·C]` image tensor. Differentiable
    /// w.r.t. the image.
    pub fn encode_tensor(&self, img: &Tensor) -> Result<PatchFeatures> {
        let cfg = &self.cfg;
        let mut x = patchify(img, cfg.h, cfg.w, cfg.patch)?
            .matmul(&self.patch_embed)
            .add(&self.pos_table);
        let scale = 1.0 / (cfg.d_r as f64).sqrt();
        for b in &self.blocks {
            let xn = x.layer_norm(1e-6);
            let q = xn.matmul(&b.wq);
            let k = xn.matmul(&b.wk);
            let v = xn.matmul(&b.wv);
            let attn = q
                .matmul(&k.transpose())
                .mul_scalar(scale)
                .softmax(1)
                .matmul(&v)
                .matmul(&b.wo);
            x = x.add(&attn);
            let xn = x.layer_norm(1e-6);
            let h = xn.matmul(&b.mlp_w1).add(&b.mlp_b1).tanh();
            x = x.add(&h.matmul(&b.mlp_w2).add(&b.mlp_b2));
        }
        Ok(PatchFeatures {
            tokens: x,
            fingerprint: self.fingerprint,
        })
    }

    pub fn encode(&self, img: &Image) -> Result<PatchFeatures> {
        if img.h != self.cfg.h || img.w != self.cfg.w {
            return Err(Error::Config(format!(
                "image {}x{} does not match encoder {}x{}",
                img.h, img.w, self.cfg.h, self.cfg.w
            )));
        }
        self.encode_tensor(&img.to_tensor())
    }
}

#[cfg(test)]
mod tests;
