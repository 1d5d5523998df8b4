//! Two-stage training (backbone pretraining, frozen-backbone adapter
//! training), the AdamW optimizer, test-time adaptation, ablation-variant
//! construction and DFC1 checkpointing.
//!
//! Stage 1 trains the backbone as a conditional identity generator with no
//! adapter (E = 0). Stage 2 freezes the backbone and optimizes only the
//! adapter parameters — resampler, gate, residual linear, projections —
//! plus the decoupled `W_k^Δ/W_v^Δ` projections and `λ_ca` that live inside
//! the backbone blocks. A `joint` mode unfreezes everything.

use crate::adapter::{edit_tokens, AdapterConfig, AdapterParams};
use crate::data::{Dataset, Episode};
use crate::error::{Error, Result};
use crate::flownet::{
    interpolate, predict_velocity, recover_clean, BackboneConfig, BackboneParams,
};
use crate::formats::{ByteReader, ByteWriter};
use crate::objectives::{flow_loss, pred_delta, sdc_loss, total_loss, LossBreakdown};
use crate::rng::{RngState, SeededRng};
use crate::tensor::{backward, Tensor};
use crate::vision::{patchify_image, EncoderConfig, FrozenEncoder};
use std::collections::BTreeMap;
use std::path::Path;

pub const DFC1_MAGIC: [u8; 4] = *b"DFC1";
pub const DFC1_VERSION: u32 = 1;

/// Ablation tags, `full` first. Each variant differs from `full` in exactly
/// one mechanism.
pub const VARIANT_TAGS: [&str; 7] = [
    "full",
    "w/o semantic delta",
    "w/o layernorm",
    "w/o gated residual",
    "w/o perceiver",
    "w/o per-token proj.",
    "w/o 𝓛_sdc",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Adapter,
    Joint,
}

impl Stage {
    pub fn from_name(s: &str) -> Result<Stage> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "adapter" => Ok(Stage::Adapter),
            "joint" => Ok(Stage::Joint),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub steps: usize,
    pub lambda_sdc: f64,
    pub seed: u64,
    pub variant: String,
    pub grad_clip: f64,
    /// Keeps λ_ca at its current value (the fixed-λ reading) instead of
    /// learning it with the rest of the adapter set.
    pub freeze_lambda: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Adapter,
            // 1e-3 is the desk-scale default: within the 2000/4000-step
            // budgets, 1e-4 leaves the pretraining flow loss an order of
            // magnitude above the level needed for faithful few-step
            // sampling.
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            batch: 16,
            steps: 4000,
            lambda_sdc: 1.0,
            seed: 1,
            variant: "full".into(),
            grad_clip: 1.0,
            freeze_lambda: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch == 0 {
            return Err(Error::Config(format!(
                "lr and batch must be positive (lr={}, batch={})",
                self.lr, self.batch
            )));
        }
        if !VARIANT_TAGS.contains(&self.variant.as_str()) {
            return Err(Error::Config(format!(
                "unknown variant tag `{}`; expected one of {:?}",
                self.variant, VARIANT_TAGS
            )));
        }
        Ok(())
    }
}

/// Everything that determines the model's structure and objective weighting.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub backbone: BackboneConfig,
    pub variant: String,
    pub lambda_sdc: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            backbone: BackboneConfig::default(),
            variant: "full".into(),
            lambda_sdc: 1.0,
        }
    }
}

impl ModelConfig {
    /// FNV-1a over the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.h != self.encoder.h || data.w != self.encoder.w || data.patch != self.encoder.patch
        {
            return Err(Error::Incompatible(format!(
                "dataset {}x{} patch {} does not match model {}x{} patch {}",
                data.h, data.w, data.patch, self.encoder.h, self.encoder.w, self.encoder.patch
            )));
        }
        Ok(())
    }
}

/// Model configuration for an ablation tag: `full` plus exactly one switch.
pub fn make_variant(tag: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    cfg.variant = tag.to_string();
    match tag {
        "full" => {}
        "w/o semantic delta" => cfg.adapter.use_semantic_delta = false,
        "w/o layernorm" => cfg.adapter.use_layernorm = false,
        "w/o gated residual" => cfg.adapter.use_gated_residual = false,
        "w/o perceiver" => cfg.adapter.use_perceiver = false,
        "w/o per-token proj." => cfg.adapter.per_token_projection = false,
        "w/o 𝓛_sdc" => cfg.lambda_sdc = 0.0,
        other => return Err(Error::Config(format!("unknown variant tag `{other}`"))),
    }
    Ok(cfg)
}

pub struct Model {
    pub cfg: ModelConfig,
    pub enc: FrozenEncoder,
    pub adapter: AdapterParams,
    pub backbone: BackboneParams,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Model {
        let enc = FrozenEncoder::new(cfg.encoder.clone());
        let adapter = AdapterParams::init(cfg.adapter.clone(), &mut SeededRng::derive(seed, 0xADA));
        let backbone =
            BackboneParams::init(cfg.backbone.clone(), &mut SeededRng::derive(seed, 0xBAC));
        Model {
            cfg,
            enc,
            adapter,
            backbone,
        }
    }

    /// All trainable tensors with their names; the flag marks parameters
    /// belonging to the adapter's trainable set (adapter params plus the
    /// decoupled projections and λ_ca inside the backbone).
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        self.adapter.visit_params(&mut |n, t| f(n, t, true));
        self.backbone.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.adapter.visit_params_mut(&mut |n, t| f(n, t, true));
        self.backbone.visit_params_mut(f);
    }

    /// Byte snapshot of the parameters frozen in adapter mode, for the
    /// freeze contract.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        let mut out = self.enc.weight_bytes();
        self.visit_params(&mut |_, t, adapter_owned| {
            if !adapter_owned {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        });
        out
    }
}

fn trainable(stage: Stage, adapter_owned: bool) -> bool {
    match stage {
        Stage::Pretrain => !adapter_owned,
        Stage::Adapter => adapter_owned,
        Stage::Joint => true,
    }
}

/// AdamW with decoupled weight decay and bias correction. Moments are keyed
/// by parameter name so the optimizer survives checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> AdamW {
        AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// One parameter update at the current step count.
    pub fn update(&mut self, name: &str, w: &[f64], g: &[f64]) -> Vec<f64> {
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut out = Vec::with_capacity(w.len());
        for i in 0..w.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            out.push(
                w[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps)
                    - self.lr * self.weight_decay * w[i],
            );
        }
        out
    }
}

/// Training state: model, optimizer, generator position and step counter.
/// Saving and reloading this resumes training bitwise.
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub model: Model,
    pub opt: AdamW,
    pub rng: RngState,
    pub step: u64,
}

impl Checkpoint {
    pub fn init(cfg: ModelConfig, tcfg: &TrainConfig) -> Checkpoint {
        let model = Model::init(cfg.clone(), tcfg.seed);
        Checkpoint {
            cfg,
            model,
            opt: AdamW::new(tcfg),
            rng: SeededRng::derive(tcfg.seed, 0x5EED).state(),
            step: 0,
        }
    }

    /// Deep copy (tensor data cloned, graph-free).
    pub fn duplicate(&self) -> Checkpoint {
        let mut model = Model::init(self.cfg.clone(), 0);
        let mut src: BTreeMap<String, Tensor> = BTreeMap::new();
        self.model.visit_params(&mut |n, t, _| {
            src.insert(n.to_string(), t.clone());
        });
        model.visit_params_mut(&mut |n, t, _| {
            *t = Tensor::param(src[n].shape(), src[n].data().to_vec());
        });
        Checkpoint {
            cfg: self.cfg.clone(),
            model,
            opt: self.opt.clone(),
            rng: self.rng.clone(),
            step: self.step,
        }
    }
}

/// Canonical null-edit tokens E₀ used during stage-1 pretraining.
pub fn null_edit_tokens(cfg: &ModelConfig) -> Tensor {
    Tensor::zeros(&[cfg.adapter.n_queries, cfg.adapter.d_c])
}

/// Stage-1 objective for one episode: flow-match the reconstruction of the
/// SOURCE image conditioned on its own tokens, no adapter signal.
fn pretrain_episode_loss(
    model: &Model,
    ep: &Episode,
    rng: &mut SeededRng,
) -> Result<(Tensor, f64)> {
    let a = &ep.exemplar_source;
    let z0 = patchify_image(a, model.cfg.backbone.patch)?;
    let z1 = Tensor::from_vec(z0.shape(), rng.normal_vec(z0.len()));
    let t = rng.uniform();
    let state = interpolate(&z0, &z1, t)?;
    let e0 = null_edit_tokens(&model.cfg);
    let v_hat = predict_velocity(&state, a, &e0, &model.backbone, None)?;
    let flow = flow_loss(&v_hat, &z0, &z1);
    let val = flow.item();
    Ok((flow, val))
}

/// Stage-2 objective for one episode: full loss with the adapter in the
/// loop. `z0 = patchify(a′)`, SDC via the one-step clean estimate
/// `ẑ0 = z1 − v̂`.
fn adapter_episode_loss(
    model: &Model,
    ep: &Episode,
    rng: &mut SeededRng,
    lambda_sdc: f64,
) -> Result<(Tensor, LossBreakdown)> {
    let a = &ep.exemplar_source;
    let a2 = &ep.exemplar_target;
    let f_a = model.enc.encode(a)?;
    let f_a2 = model.enc.encode(a2)?;
    let (delta_gt, e) = edit_tokens(&model.adapter, &f_a, &f_a2)?;
    let z0 = patchify_image(a2, model.cfg.backbone.patch)?;
    let z1 = Tensor::from_vec(z0.shape(), rng.normal_vec(z0.len()));
    let t = rng.uniform();
    let state = interpolate(&z0, &z1, t)?;
    let v_hat = predict_velocity(&state, a, &e, &model.backbone, None)?;
    let flow = flow_loss(&v_hat, &z0, &z1);
    let z0_hat = recover_clean(&z1, &v_hat);
    let delta_pred = pred_delta(a, &z0_hat, &model.enc, model.cfg.adapter.use_layernorm)?;
    let sdc = sdc_loss(&delta_gt, &delta_pred);
    let breakdown = LossBreakdown::new(flow.item(), sdc.item(), lambda_sdc);
    Ok((total_loss(&flow, &sdc, lambda_sdc), breakdown))
}

fn apply_update(ckpt: &mut Checkpoint, tcfg: &TrainConfig, loss: &Tensor) -> Result<()> {
    let updates = |n: &str, adapter_owned: bool| {
        trainable(tcfg.stage, adapter_owned) && !(tcfg.freeze_lambda && n == "backbone.lambda_ca")
    };
    let grads = backward(loss);
    // clip at global norm over the trainable set
    let mut sq = 0.0;
    let mut named: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    ckpt.model.visit_params(&mut |n, t, adapter_owned| {
        if updates(n, adapter_owned) {
            let g = grads.grad_or_zeros(t);
            sq += g.iter().map(|v| v * v).sum::<f64>();
            named.insert(n.to_string(), g);
        }
    });
    let norm = sq.sqrt();
    let scale = if tcfg.grad_clip > 0.0 && norm > tcfg.grad_clip {
        tcfg.grad_clip / norm
    } else {
        1.0
    };
    ckpt.opt.begin_step();
    let opt = &mut ckpt.opt;
    let mut failure: Option<Error> = None;
    ckpt.model.visit_params_mut(&mut |n, t, adapter_owned| {
        if !updates(n, adapter_owned) || failure.is_some() {
            return;
        }
        let g: Vec<f64> = named[n].iter().map(|v| v * scale).collect();
        let new = opt.update(n, t.data(), &g);
        if new.iter().any(|v| !v.is_finite()) {
            failure = Some(Error::Numeric(format!(
                "non-finite update for `{n}` at step {}",
                opt.step
            )));
            return;
        }
        *t = Tensor::param(t.shape(), new);
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Runs `tcfg.steps` optimization steps on the checkpoint in place,
/// continuing from its stored RNG position. Returns the per-step loss curve.
pub fn train_steps(
    ckpt: &mut Checkpoint,
    tcfg: &TrainConfig,
    data: &Dataset,
) -> Result<Vec<LossBreakdown>> {
    tcfg.validate()?;
    ckpt.cfg.check_dataset(data)?;
    let train: Vec<&Episode> = data.train_episodes().collect();
    if train.is_empty() {
        return Err(Error::Config("dataset has no training episodes".into()));
    }
    let mut rng = SeededRng::from_state(&ckpt.rng);
    let mut curve = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let mut sum: Option<Tensor> = None;
        let mut flow_acc = 0.0;
        let mut sdc_acc = 0.0;
        for _ in 0..tcfg.batch {
            let ep = train[rng.index(train.len())];
            let term = match tcfg.stage {
                Stage::Pretrain => {
                    let (l, flow) = pretrain_episode_loss(&ckpt.model, ep, &mut rng)?;
                    flow_acc += flow;
                    l
                }
                Stage::Adapter | Stage::Joint => {
                    let (l, b) = adapter_episode_loss(&ckpt.model, ep, &mut rng, tcfg.lambda_sdc)?;
                    flow_acc += b.flow;
                    sdc_acc += b.sdc;
                    l
                }
            };
            sum = Some(match sum {
                None => term,
                Some(s) => s.add(&term),
            });
        }
        let loss = sum.unwrap().mul_scalar(1.0 / tcfg.batch as f64);
        let breakdown = LossBreakdown::new(
            flow_acc / tcfg.batch as f64,
            sdc_acc / tcfg.batch as f64,
            match tcfg.stage {
                Stage::Pretrain => 0.0,
                _ => tcfg.lambda_sdc,
            },
        );
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}",
                ckpt.step + step as u64
            )));
        }
        apply_update(ckpt, tcfg, &loss)?;
        curve.push(breakdown);
        ckpt.step += 1;
    }
    ckpt.rng = rng.state();
    Ok(curve)
}

/// Stage 1: trains a fresh backbone as a conditional identity generator.
pub fn pretrain_backbone(
    cfg: ModelConfig,
    tcfg: &TrainConfig,
    data: &Dataset,
) -> Result<(Checkpoint, Vec<LossBreakdown>)> {
    let tcfg = TrainConfig {
        stage: Stage::Pretrain,
        ..tcfg.clone()
    };
    let mut ckpt = Checkpoint::init(cfg, &tcfg);
    let curve = train_steps(&mut ckpt, &tcfg, data)?;
    Ok((ckpt, curve))
}

/// Stage 2: trains the adapter set on top of a pretrained backbone. The
/// backbone checkpoint is not mutated; the returned checkpoint gets a fresh
/// optimizer and RNG stream derived from `tcfg.seed`.
pub fn train_adapter(
    base: &Checkpoint,
    tcfg: &TrainConfig,
    data: &Dataset,
) -> Result<(Checkpoint, Vec<LossBreakdown>)> {
    if !matches!(tcfg.stage, Stage::Adapter | Stage::Joint) {
        return Err(Error::Config("train_adapter requires stage adapter or joint".into()));
    }
    let mut ckpt = base.duplicate();
    ckpt.opt = AdamW::new(tcfg);
    ckpt.rng = SeededRng::derive(tcfg.seed, 0xADA5EED).state();
    ckpt.step = 0;
    let curve = train_steps(&mut ckpt, tcfg, data)?;
    Ok((ckpt, curve))
}

/// Builds a fresh checkpoint for an ablation variant on top of a shared
/// stage-1 backbone: the frozen parameter set is copied from `base`, the
/// adapter set is re-initialized from `tcfg.seed` under the variant config.
/// Comparisons across variants then isolate the mechanism, not the
/// initialization.
pub fn attach_variant(
    base: &Checkpoint,
    vcfg: ModelConfig,
    tcfg: &TrainConfig,
) -> Result<Checkpoint> {
    if vcfg.backbone != base.cfg.backbone || vcfg.encoder != base.cfg.encoder {
        return Err(Error::Incompatible(
            "variant must share the base checkpoint's backbone and encoder".into(),
        ));
    }
    let mut src: BTreeMap<String, Tensor> = BTreeMap::new();
    base.model.visit_params(&mut |n, t, adapter_owned| {
        if !adapter_owned {
            src.insert(n.to_string(), t.clone());
        }
    });
    let mut ckpt = Checkpoint::init(vcfg, tcfg);
    ckpt.model.visit_params_mut(&mut |n, t, adapter_owned| {
        if !adapter_owned {
            *t = Tensor::param(src[n].shape(), src[n].data().to_vec());
        }
    });
    Ok(ckpt)
}

/// Test-time adaptation: a few steps of the full objective on one exemplar
/// pair, adapter parameter set only, batch size 1. The input checkpoint is
/// copied, never mutated.
pub fn tta(
    base: &Checkpoint,
    pair: &Episode,
    steps: usize,
    seed: u64,
) -> Result<(Checkpoint, Vec<LossBreakdown>)> {
    tta_opts(base, pair, steps, seed, false)
}

/// [`tta`] with the option to keep λ_ca frozen during adaptation.
pub fn tta_opts(
    base: &Checkpoint,
    pair: &Episode,
    steps: usize,
    seed: u64,
    freeze_lambda: bool,
) -> Result<(Checkpoint, Vec<LossBreakdown>)> {
    let tcfg = TrainConfig {
        stage: Stage::Adapter,
        lr: 1e-4, // gentler than the training default: 20 steps on one pair
        batch: 1,
        steps,
        seed,
        lambda_sdc: base.cfg.lambda_sdc,
        variant: base.cfg.variant.clone(),
        freeze_lambda,
        ..TrainConfig::default()
    };
    let mut ckpt = base.duplicate();
    ckpt.opt = AdamW::new(&tcfg);
    ckpt.rng = SeededRng::derive(seed, 0x77A).state();
    ckpt.step = 0;
    let mut rng = SeededRng::from_state(&ckpt.rng);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, breakdown) =
            adapter_episode_loss(&ckpt.model, pair, &mut rng, tcfg.lambda_sdc)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at tta step {step}")));
        }
        apply_update(&mut ckpt, &tcfg, &loss)?;
        curve.push(breakdown);
        ckpt.step += 1;
    }
    ckpt.rng = rng.state();
    Ok((ckpt, curve))
}

// ---------------------------------------------------------------------------
// DFC1 container
// ---------------------------------------------------------------------------

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

fn write_entry(w: &mut ByteWriter, name: &str, dtype: u8, dims: &[usize], data: &[f64]) {
    assert_eq!(dims.iter().product::<usize>(), data.len());
    w.u16(name.len() as u16);
    w.bytes(name.as_bytes());
    w.u8(dtype);
    w.u8(dims.len() as u8);
    for &d in dims {
        w.u32(d as u32);
    }
    for &v in data {
        match dtype {
            DTYPE_F32 => w.f32(v as f32),
            _ => w.f64(v),
        }
    }
}

struct Entry {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn read_entries(raw: &[u8]) -> Result<BTreeMap<String, Entry>> {
    let mut r = ByteReader::checked(raw)?;
    r.expect_magic(&DFC1_MAGIC)?;
    r.expect_version(DFC1_VERSION)?;
    let count = r.u32()? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?.to_vec())
            .map_err(|_| Error::Malformed("entry name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype > DTYPE_F64 {
            return Err(Error::Malformed(format!("unknown dtype {dtype} for `{name}`")));
        }
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(match dtype {
                DTYPE_F32 => r.f32()? as f64,
                _ => r.f64()?,
            });
        }
        entries.insert(name, Entry { dims, data });
    }
    r.done()?;
    Ok(entries)
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut entries: Vec<(String, u8, Vec<usize>, Vec<f64>)> = Vec::new();
    ckpt.model.visit_params(&mut |n, t, _| {
        entries.push((n.to_string(), DTYPE_F64, t.shape().to_vec(), t.data().to_vec()));
    });
    for (n, m) in &ckpt.opt.m {
        entries.push((format!("opt.m.{n}"), DTYPE_F64, vec![m.len()], m.clone()));
    }
    for (n, v) in &ckpt.opt.v {
        entries.push((format!("opt.v.{n}"), DTYPE_F64, vec![v.len()], v.clone()));
    }
    entries.push((
        "opt.hyper".into(),
        DTYPE_F64,
        vec![6],
        vec![
            ckpt.opt.lr,
            ckpt.opt.weight_decay,
            ckpt.opt.beta1,
            ckpt.opt.beta2,
            ckpt.opt.eps,
            f64::from_bits(ckpt.opt.step),
        ],
    ));
    let seed_words: Vec<f64> = ckpt
        .rng
        .seed
        .chunks(8)
        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    entries.push(("rng.seed".into(), DTYPE_F64, vec![4], seed_words));
    entries.push((
        "rng.word_pos".into(),
        DTYPE_F64,
        vec![2],
        vec![
            f64::from_bits(ckpt.rng.word_pos as u64),
            f64::from_bits((ckpt.rng.word_pos >> 64) as u64),
        ],
    ));
    entries.push((
        "meta.step".into(),
        DTYPE_F64,
        vec![1],
        vec![f64::from_bits(ckpt.step)],
    ));
    entries.push((
        "meta.config_hash".into(),
        DTYPE_F64,
        vec![1],
        vec![f64::from_bits(ckpt.cfg.hash())],
    ));
    let json = serde_json::to_string(&ckpt.cfg).expect("config serializes");
    entries.push((
        "meta.config_json".into(),
        DTYPE_F32,
        vec![json.len()],
        json.bytes().map(|b| b as f64).collect(),
    ));
    let mut w = ByteWriter::new();
    w.magic(&DFC1_MAGIC);
    w.u32(DFC1_VERSION);
    w.u32(entries.len() as u32);
    for (name, dtype, dims, data) in &entries {
        write_entry(&mut w, name, *dtype, dims, data);
    }
    w.finish()
}

fn need<'a>(entries: &'a BTreeMap<String, Entry>, name: &str) -> Result<&'a Entry> {
    entries
        .get(name)
        .ok_or_else(|| Error::Malformed(format!("checkpoint missing entry `{name}`")))
}

pub fn decode_checkpoint(raw: &[u8]) -> Result<Checkpoint> {
    let entries = read_entries(raw)?;
    let json: String = need(&entries, "meta.config_json")?
        .data
        .iter()
        .map(|&v| v as u8 as char)
        .collect();
    let cfg: ModelConfig = serde_json::from_str(&json)
        .map_err(|e| Error::Malformed(format!("config json: {e}")))?;
    let stored_hash = f64::to_bits(need(&entries, "meta.config_hash")?.data[0]);
    if stored_hash != cfg.hash() {
        return Err(Error::Incompatible(format!(
            "config hash {:#018x} does not match stored {:#018x}",
            cfg.hash(),
            stored_hash
        )));
    }
    let mut model = Model::init(cfg.clone(), 0);
    let mut missing: Option<Error> = None;
    model.visit_params_mut(&mut |n, t, _| {
        if missing.is_some() {
            return;
        }
        match entries.get(n) {
            None => missing = Some(Error::Malformed(format!("checkpoint missing tensor `{n}`"))),
            Some(e) if e.dims != t.shape() => {
                missing = Some(Error::Incompatible(format!(
                    "tensor `{n}` has shape {:?}, model expects {:?}",
                    e.dims,
                    t.shape()
                )))
            }
            Some(e) => *t = Tensor::param(&e.dims, e.data.clone()),
        }
    });
    if let Some(e) = missing {
        return Err(e);
    }
    let hyper = &need(&entries, "opt.hyper")?.data;
    if hyper.len() != 6 {
        return Err(Error::Malformed("opt.hyper must have 6 values".into()));
    }
    let mut opt = AdamW {
        lr: hyper[0],
        weight_decay: hyper[1],
        beta1: hyper[2],
        beta2: hyper[3],
        eps: hyper[4],
        step: f64::to_bits(hyper[5]),
        m: BTreeMap::new(),
        v: BTreeMap::new(),
    };
    for (name, e) in &entries {
        if let Some(p) = name.strip_prefix("opt.m.") {
            opt.m.insert(p.to_string(), e.data.clone());
        } else if let Some(p) = name.strip_prefix("opt.v.") {
            opt.v.insert(p.to_string(), e.data.clone());
        }
    }
    let seed_words = &need(&entries, "rng.seed")?.data;
    let mut seed = [0u8; 32];
    for (i, v) in seed_words.iter().enumerate().take(4) {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&f64::to_bits(*v).to_le_bytes());
    }
    let wp = &need(&entries, "rng.word_pos")?.data;
    let word_pos = f64::to_bits(wp[0]) as u128 | ((f64::to_bits(wp[1]) as u128) << 64);
    let step = f64::to_bits(need(&entries, "meta.step")?.data[0]);
    Ok(Checkpoint {
        cfg,
        model,
        opt,
        rng: RngState { seed, word_pos },
        step,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and insists it was produced under `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.cfg.hash() != expected.hash() {
        return Err(Error::Incompatible(format!(
            "checkpoint config hash {:#018x} does not match expected {:#018x}",
            ckpt.cfg.hash(),
            expected.hash()
        )));
    }
    Ok(ckpt)
}
