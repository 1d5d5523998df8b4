use super::*;
use crate::adapter::{patch_weights, semantic_delta, AdapterConfig};
use crate::rng::SeededRng;
use crate::tensor::grad_check;
use crate::vision::{patchify_image, EncoderConfig, CHANNELS};
use proptest::prelude::*;

fn delta_of(data: Vec<f64>, l: usize, d: usize) -> SemanticDelta {
    let delta = Tensor::from_vec(&[l, d], data);
    let weights = patch_weights(&delta);
    SemanticDelta {
        delta,
        refined: None,
        weights,
    }
}

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = SeededRng::new(seed);
    Image::from_data(h, w, (0..h * w * CHANNELS).map(|_| rng.uniform()).collect())
}

#[test]
fn flow_loss_hand_values() {
    let z0 = Tensor::zeros(&[4]);
    let z1 = Tensor::ones(&[4]);
    let v_true = z1.sub(&z0);
    assert_eq!(flow_loss(&v_true, &z0, &z1).item(), 0.0);
    assert_eq!(flow_loss(&Tensor::zeros(&[4]), &z0, &z1).item(), 1.0);
    // v̂ = [2], target = [0] -> 4
    let z = Tensor::zeros(&[1]);
    assert_eq!(flow_loss(&Tensor::from_vec(&[1], vec![2.0]), &z, &z).item(), 4.0);
}

#[test]
fn sdc_loss_single_patch_cases() {
    let gt = delta_of(vec![1.0, 0.0], 1, 2);
    let orthogonal = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]);
    let colinear = Tensor::from_vec(&[1, 2], vec![2.0, 0.0]);
    let antipodal = Tensor::from_vec(&[1, 2], vec![-1.0, 0.0]);
    assert!((sdc_loss(&gt, &orthogonal).item() - 1.0).abs() < 1e-9);
    assert!(sdc_loss(&gt, &colinear).item().abs() < 1e-7);
    assert!((sdc_loss(&gt, &antipodal).item() - 2.0).abs() < 1e-7);
}

#[test]
fn sdc_loss_perfect_prediction_leaves_weight_slack() {
    // Δ̂ == Δ -> 1 − (1/L)·Σ m
    let mut rng = SeededRng::new(3);
    let gt = delta_of(rng.normal_vec(4 * 3), 4, 3);
    let expect = 1.0 - gt.weights.iter().sum::<f64>() / 4.0;
    let loss = sdc_loss(&gt, &gt.delta.detach());
    assert!((loss.item() - expect).abs() < 1e-7);
}

#[test]
fn sdc_loss_zero_delta_episode_is_silent() {
    let gt = delta_of(vec![0.0; 6], 2, 3);
    let pred = Tensor::from_vec(&[2, 3], SeededRng::new(4).normal_vec(6));
    assert_eq!(sdc_loss(&gt, &pred).item(), 1.0); // all weights zero, cos ignored
}

#[test]
fn pred_delta_reconstruction_of_source_is_zero() {
    let enc = FrozenEncoder::new(EncoderConfig::default());
    let a = random_image(16, 16, 5);
    let z0 = patchify_image(&a, 4).unwrap();
    let d = pred_delta(&a, &z0, &enc, true).unwrap();
    assert!(d.data().iter().all(|&v| v == 0.0));
}

#[test]
fn pred_delta_consistent_with_extractor() {
    let enc = FrozenEncoder::new(EncoderConfig::default());
    let a = random_image(16, 16, 6);
    let a2 = random_image(16, 16, 7);
    let z0 = patchify_image(&a2, 4).unwrap();
    let via_loss = pred_delta(&a, &z0, &enc, true).unwrap();
    let fa = enc.encode(&a).unwrap();
    let fa2 = enc.encode(&a2).unwrap();
    let via_extractor = semantic_delta(&fa, &fa2, &AdapterConfig::default()).unwrap();
    assert!(via_loss.max_abs_diff(&via_extractor.delta) == 0.0);
}

#[test]
fn sdc_through_pred_delta_gradients_check_out() {
    let cfg = EncoderConfig {
        h: 8,
        w: 8,
        d_r: 8,
        ..Default::default()
    };
    let enc = FrozenEncoder::new(cfg);
    let a = random_image(8, 8, 8);
    let fa = enc.encode(&a).unwrap();
    let target = random_image(8, 8, 9);
    let ft = enc.encode(&target).unwrap();
    let gt = semantic_delta(&fa, &ft, &AdapterConfig::default()).unwrap();
    let f = move |inp: &[Tensor]| {
        let d = pred_delta(&a, &inp[0], &enc, true).unwrap();
        sdc_loss(&gt, &d)
    };
    let z0 = patchify_image(&random_image(8, 8, 10), 4).unwrap();
    let report = grad_check(&f, &[z0]);
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn sdc_gradcheck_on_random_deltas() {
    for seed in 0..5 {
        let mut rng = SeededRng::new(40 + seed);
        let gt = delta_of(rng.normal_vec(5 * 4), 5, 4);
        let f = move |inp: &[Tensor]| sdc_loss(&gt, &inp[0]);
        let pred = Tensor::from_vec(&[5, 4], SeededRng::new(50 + seed).normal_vec(20));
        let report = grad_check(&f, &[pred]);
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn total_loss_arithmetic_and_ablation() {
    let flow = Tensor::scalar(0.5);
    let sdc = Tensor::scalar(0.25);
    assert_eq!(total_loss(&flow, &sdc, 1.0).item(), 0.75);
    assert_eq!(total_loss(&flow, &sdc, 0.0).item(), 0.5);
    assert_eq!(total_loss(&Tensor::scalar(0.0), &Tensor::scalar(0.0), 1.0).item(), 0.0);
    // λ=0 keeps the flow tensor itself (identical graph, identical grads)
    assert_eq!(total_loss(&flow, &sdc, 0.0).id(), flow.id());
    let b = LossBreakdown::new(0.5, 0.25, 1.0);
    assert_eq!(b.total, b.flow + b.lambda_sdc * b.sdc);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sdc_loss_bounded_and_scale_invariant(seed in 0u64..10_000) {
        let mut rng = SeededRng::new(seed);
        let l = 1 + rng.index(6);
        let d = 2 + rng.index(5);
        let gt = delta_of(rng.normal_vec(l * d), l, d);
        let pred = Tensor::from_vec(&[l, d], rng.normal_vec(l * d));
        let loss = sdc_loss(&gt, &pred).item();
        prop_assert!((0.0..=2.0).contains(&loss), "loss {loss}");
        // positive per-token rescale of the prediction
        let scales: Vec<f64> = (0..l).map(|_| rng.uniform_range(0.2, 5.0)).collect();
        let mut scaled = pred.data().to_vec();
        for (t, s) in scales.iter().enumerate() {
            for v in scaled[t * d..(t + 1) * d].iter_mut() {
                *v *= s;
            }
        }
        let loss2 = sdc_loss(&gt, &Tensor::from_vec(&[l, d], scaled)).item();
        prop_assert!((loss - loss2).abs() < 1e-6, "{loss} vs {loss2}");
    }

    #[test]
    fn flow_loss_is_convex_in_prediction(seed in 0u64..5_000) {
        let mut rng = SeededRng::new(seed);
        let z0 = Tensor::from_vec(&[6], rng.normal_vec(6));
        let z1 = Tensor::from_vec(&[6], rng.normal_vec(6));
        let v1 = Tensor::from_vec(&[6], rng.normal_vec(6));
        let v2 = Tensor::from_vec(&[6], rng.normal_vec(6));
        let mid = v1.add(&v2).mul_scalar(0.5);
        let lhs = flow_loss(&mid, &z0, &z1).item();
        let rhs = 0.5 * (flow_loss(&v1, &z0, &z1).item() + flow_loss(&v2, &z0, &z1).item());
        prop_assert!(lhs <= rhs + 1e-12);
    }
}
