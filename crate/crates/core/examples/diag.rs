use deltaflow_core::adapter::edit_tokens;
use deltaflow_core::data::load_dataset;
use deltaflow_core::flownet::{predict_velocity, FlowState};
use deltaflow_core::rng::SeededRng;
use deltaflow_core::tensor::Tensor;
use deltaflow_core::trainer::load_checkpoint;
use deltaflow_core::vision::patchify_image;
use std::path::Path;

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).sum()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = load_checkpoint(Path::new(&args[1])).unwrap();
    let data = load_dataset(Path::new(&args[2])).unwrap();
    let model = &ckpt.model;
    let patch = model.cfg.backbone.patch;
    let mut seen: Vec<&str> = vec![];
    for ep in data.eval_episodes() {
        let fam = ep.spec.family.name();
        if seen.contains(&fam) { continue; }
        seen.push(fam);
        let f_a = model.enc.encode(&ep.exemplar_source).unwrap();
        let f_a2 = model.enc.encode(&ep.exemplar_target).unwrap();
        let (_, e) = edit_tokens(&model.adapter, &f_a, &f_a2).unwrap();
        let s = patchify_image(&ep.query, patch).unwrap();
        let z0 = patchify_image(&ep.query_target, patch).unwrap();
        let d = z0.sub(&s);
        let dd = dot(&d, &d);
        let mut rng = SeededRng::new(4242);
        let z1 = Tensor::from_vec(z0.shape(), rng.normal_vec(z0.len()));
        print!("{fam:16}");
        for &t in &[1.0, 0.75, 0.5, 0.25] {
            let zt = z0.mul_scalar(1.0 - t).add(&z1.mul_scalar(t));
            let v = predict_velocity(&FlowState { z: zt.clone(), t }, &ep.query, &e, &model.backbone, None).unwrap();
            let z0_hat = zt.sub(&v.mul_scalar(t));
            let resid = z0_hat.sub(&s);
            let alpha = dot(&resid, &d) / dd;
            let off = {
                let perp = resid.sub(&d.mul_scalar(alpha));
                (dot(&perp, &perp) / resid.len() as f64).sqrt()
            };
            print!("  t={t}: a={alpha:+.2} off={off:.3}");
        }
        println!();
    }
}
