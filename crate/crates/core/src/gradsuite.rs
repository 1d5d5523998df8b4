//! Finite-difference validation suite covering every differentiable
//! operation plus the two composed training paths. Runnable from the CLI
//! (`gradcheck`) and asserted wholesale by the acceptance tests.

use crate::adapter::AdapterConfig;
use crate::flownet::{predict_velocity, BackboneConfig, BackboneParams, FlowState};
use crate::objectives::{flow_loss, pred_delta, sdc_loss};
use crate::adapter::{patch_weights, SemanticDelta};
use crate::rng::SeededRng;
use crate::tensor::{grad_check, Tensor};
use crate::vision::{EncoderConfig, FrozenEncoder, Image, CHANNELS};

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
    pub failure: Option<String>,
}

impl SuiteCase {
    pub fn passes(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_err < tol
    }
}

fn rand(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::from_vec(shape, rng.normal_vec(shape.iter().product()))
}

fn positive(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let data: Vec<f64> = rng
        .normal_vec(shape.iter().product())
        .iter()
        .map(|v| v.abs() + 0.5)
        .collect();
    Tensor::from_vec(shape, data)
}

type CaseFn = Box<dyn Fn(&mut SeededRng) -> (Box<dyn Fn(&[Tensor]) -> Tensor>, Vec<Tensor>)>;

fn op_cases() -> Vec<(&'static str, CaseFn)> {
    let mut cases: Vec<(&'static str, CaseFn)> = Vec::new();
    macro_rules! case {
        ($name:literal, $gen:expr) => {
            cases.push(($name, Box::new($gen)));
        };
    }
    case!("add", |r| (
        Box::new(|i: &[Tensor]| i[0].add(&i[1]).square().sum()),
        vec![rand(r, &[3, 4]), rand(r, &[4])]
    ));
    case!("sub", |r| (
        Box::new(|i: &[Tensor]| i[0].sub(&i[1]).square().sum()),
        vec![rand(r, &[3, 4]), rand(r, &[3, 4])]
    ));
    case!("mul", |r| (
        Box::new(|i: &[Tensor]| i[0].mul(&i[1]).sum()),
        vec![rand(r, &[3, 4]), rand(r, &[4])]
    ));
    case!("div", |r| (
        Box::new(|i: &[Tensor]| i[0].div(&i[1]).sum()),
        vec![rand(r, &[3, 4]), positive(r, &[4])]
    ));
    case!("add_scalar", |r| (
        Box::new(|i: &[Tensor]| i[0].add_scalar(0.7).square().sum()),
        vec![rand(r, &[5])]
    ));
    case!("mul_scalar", |r| (
        Box::new(|i: &[Tensor]| i[0].mul_scalar(-1.3).square().sum()),
        vec![rand(r, &[5])]
    ));
    case!("tanh", |r| (
        Box::new(|i: &[Tensor]| i[0].tanh().sum()),
        vec![rand(r, &[6])]
    ));
    case!("square", |r| (
        Box::new(|i: &[Tensor]| i[0].square().sum()),
        vec![rand(r, &[6])]
    ));
    case!("sqrt", |r| (
        Box::new(|i: &[Tensor]| i[0].sqrt().sum()),
        vec![positive(r, &[6])]
    ));
    case!("matmul", |r| (
        Box::new(|i: &[Tensor]| i[0].matmul(&i[1]).square().sum()),
        vec![rand(r, &[3, 4]), rand(r, &[4, 2])]
    ));
    case!("transpose", |r| (
        Box::new(|i: &[Tensor]| i[0].transpose().matmul(&i[1]).sum()),
        vec![rand(r, &[3, 4]), rand(r, &[3, 2])]
    ));
    case!("sum", |r| (
        Box::new(|i: &[Tensor]| i[0].sum().square()),
        vec![rand(r, &[7])]
    ));
    case!("mean", |r| (
        Box::new(|i: &[Tensor]| i[0].mean().square()),
        vec![rand(r, &[7])]
    ));
    case!("sum_last", |r| (
        Box::new(|i: &[Tensor]| i[0].sum_last().square().sum()),
        vec![rand(r, &[3, 5])]
    ));
    case!("mean_rows", |r| (
        Box::new(|i: &[Tensor]| i[0].mean_rows().square().sum()),
        vec![rand(r, &[3, 5])]
    ));
    case!("norm_last", |r| (
        Box::new(|i: &[Tensor]| i[0].norm_last().sum()),
        vec![positive(r, &[3, 5])]
    ));
    case!("softmax", |r| (
        Box::new(|i: &[Tensor]| i[0].softmax(1).mul(&i[1]).sum()),
        vec![rand(r, &[3, 5]), rand(r, &[3, 5])]
    ));
    case!("layer_norm", |r| (
        Box::new(|i: &[Tensor]| i[0].layer_norm(1e-6).mul(&i[1]).sum()),
        vec![rand(r, &[3, 5]), rand(r, &[3, 5])]
    ));
    case!("concat_rows", |r| (
        Box::new(|i: &[Tensor]| {
            Tensor::concat_rows(&[i[0].clone(), i[1].clone()]).square().sum()
        }),
        vec![rand(r, &[2, 4]), rand(r, &[3, 4])]
    ));
    case!("concat_cols", |r| (
        Box::new(|i: &[Tensor]| {
            Tensor::concat_cols(&[i[0].clone(), i[1].clone()]).square().sum()
        }),
        vec![rand(r, &[3, 2]), rand(r, &[3, 4])]
    ));
    case!("slice_rows", |r| (
        Box::new(|i: &[Tensor]| i[0].slice_rows(1, 3).square().sum()),
        vec![rand(r, &[4, 3])]
    ));
    case!("slice_cols", |r| (
        Box::new(|i: &[Tensor]| i[0].slice_cols(1, 3).square().sum()),
        vec![rand(r, &[3, 4])]
    ));
    case!("gather", |r| (
        Box::new(|i: &[Tensor]| i[0].gather(&[3, 1, 4, 1, 5], &[5]).square().sum()),
        vec![rand(r, &[6])]
    ));
    case!("reshape", |r| (
        Box::new(|i: &[Tensor]| i[0].reshape(&[2, 6]).square().sum()),
        vec![rand(r, &[12])]
    ));
    case!("broadcast_rows", |r| (
        Box::new(|i: &[Tensor]| i[0].broadcast_rows(4).mul(&i[1]).sum()),
        vec![rand(r, &[3]), rand(r, &[4, 3])]
    ));
    case!("cosine_last", |r| (
        Box::new(|i: &[Tensor]| i[0].cosine_last(&i[1], 1e-8).sum()),
        vec![positive(r, &[3, 4]), positive(r, &[3, 4])]
    ));
    cases
}

fn small_backbone() -> (BackboneConfig, Image) {
    let cfg = BackboneConfig {
        h: 8,
        w: 8,
        patch: 4,
        d_m: 8,
        d_c: 8,
        blocks: 1,
        heads: 2,
        mlp_hidden: 16,
        inject_blocks: None,
    };
    let mut rng = SeededRng::new(99);
    let img = Image::from_data(
        8,
        8,
        (0..8 * 8 * CHANNELS).map(|_| rng.uniform()).collect(),
    );
    (cfg, img)
}

/// flow_loss ∘ predict_velocity w.r.t. a representative parameter set:
/// a self-attention projection, a decoupled key projection and λ_ca.
fn flow_path_case(seed: u64) -> f64 {
    let (cfg, img) = small_backbone();
    let mut rng = SeededRng::new(seed);
    let z0 = rand(&mut rng, &[cfg.tokens(), cfg.d_z()]);
    let z1 = rand(&mut rng, &[cfg.tokens(), cfg.d_z()]);
    let t = rng.uniform();
    let e = rand(&mut rng, &[2, cfg.d_c]);
    let init_seed = seed.wrapping_add(1);
    let f = {
        let cfg = cfg.clone();
        let img = img.clone();
        let (z0, z1, e) = (z0.clone(), z1.clone(), e.clone());
        move |inp: &[Tensor]| {
            let mut p = BackboneParams::init(cfg.clone(), &mut SeededRng::new(init_seed));
            p.visit_params_mut(&mut |n, tn, _| match n {
                "backbone.block0.wq" => *tn = inp[0].clone(),
                "backbone.block0.wk_delta" => *tn = inp[1].clone(),
                "backbone.lambda_ca" => *tn = inp[2].clone(),
                _ => {}
            });
            let v = predict_velocity(
                &FlowState { z: z0.clone(), t },
                &img,
                &e,
                &p,
                None,
            )
            .unwrap();
            flow_loss(&v, &z0, &z1)
        }
    };
    let mut rng2 = SeededRng::new(seed ^ 0xF10);
    let wq = rand(&mut rng2, &[8, 8]).mul_scalar(0.3);
    let wkd = rand(&mut rng2, &[8, 8]).mul_scalar(0.3);
    let lam = Tensor::from_vec(&[1], vec![0.8]);
    let report = grad_check(&f, &[wq, wkd, lam]);
    report.failure.map_or(report.max_rel_err, |_| f64::INFINITY)
}

/// sdc_loss ∘ pred_delta ∘ recover_clean w.r.t. the predicted velocity.
fn sdc_path_case(seed: u64) -> f64 {
    let enc_cfg = EncoderConfig {
        h: 8,
        w: 8,
        d_r: 8,
        ..Default::default()
    };
    let enc = FrozenEncoder::new(enc_cfg);
    let mut rng = SeededRng::new(seed);
    let source = Image::from_data(
        8,
        8,
        (0..8 * 8 * CHANNELS).map(|_| rng.uniform()).collect(),
    );
    let target = Image::from_data(
        8,
        8,
        (0..8 * 8 * CHANNELS).map(|_| rng.uniform()).collect(),
    );
    let f_a = enc.encode(&source).unwrap();
    let f_t = enc.encode(&target).unwrap();
    let gt_delta = f_t.tokens.layer_norm(1e-9).sub(&f_a.tokens.layer_norm(1e-9)).detach();
    let gt = SemanticDelta {
        weights: patch_weights(&gt_delta),
        delta: gt_delta,
        refined: None,
    };
    let _ = AdapterConfig::default();
    let z1 = rand(&mut rng, &[4, 48]);
    let f = {
        let z1 = z1.clone();
        move |inp: &[Tensor]| {
            let z0_hat = z1.sub(&inp[0]); // recover_clean(z1, v̂)
            let d = pred_delta(&source, &z0_hat, &enc, true).unwrap();
            sdc_loss(&gt, &d)
        }
    };
    let v_hat = rand(&mut SeededRng::new(seed ^ 0x5DC), &[4, 48]);
    let report = grad_check(&f, &[v_hat]);
    report.failure.map_or(report.max_rel_err, |_| f64::INFINITY)
}

/// Runs the whole suite: every op over `seeds` seeded cases, plus the two
/// composed paths. Returns one line per case.
pub fn run_suite(seeds: usize) -> Vec<SuiteCase> {
    let mut out = Vec::new();
    for (name, gen) in op_cases() {
        let mut worst = 0.0f64;
        let mut failure = None;
        for s in 0..seeds {
            let mut rng = SeededRng::new(1000 + s as u64);
            let (f, inputs) = gen(&mut rng);
            let report = grad_check(&*f, &inputs);
            if let Some(msg) = report.failure {
                failure = Some(format!("seed {s}: {msg}"));
                break;
            }
            worst = worst.max(report.max_rel_err);
        }
        out.push(SuiteCase {
            name,
            cases: seeds,
            max_rel_err: worst,
            failure,
        });
    }
    let mut worst = 0.0f64;
    for s in 0..seeds {
        worst = worst.max(flow_path_case(2000 + s as u64));
    }
    out.push(SuiteCase {
        name: "flow_loss∘predict_velocity",
        cases: seeds,
        max_rel_err: worst,
        failure: (!worst.is_finite()).then(|| "non-finite".into()),
    });
    let mut worst = 0.0f64;
    for s in 0..seeds {
        worst = worst.max(sdc_path_case(3000 + s as u64));
    }
    out.push(SuiteCase {
        name: "sdc_loss∘pred_delta∘recover_clean",
        cases: seeds,
        max_rel_err: worst,
        failure: (!worst.is_finite()).then(|| "non-finite".into()),
    });
    out
}
