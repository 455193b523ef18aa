//! Verify the hand-written backward passes against central finite
//! differences through the entire detector — both backbones, the attention
//! stack, and the classifier — using the sigmoid cross-entropy objective.
//!
//! Usage: cargo run --example gradient_check

use ndarray::Array3;
use rand::Rng;
use synthdet::core::ImageTensor;
use synthdet::detector::{test_config, DetectorModel};
use synthdet::nn::{param_count, sigmoid, Params};
use synthdet::rng::{derive_rng, tag};

fn main() -> synthdet::Result<()> {
    let model = DetectorModel::new(&test_config(), 5)?;
    let mut rng = derive_rng(6, &[tag("example-gradcheck")]);
    let img = ImageTensor::from_array(Array3::from_shape_fn((3, 224, 224), |_| rng.gen()))?;
    let target = 1.0;
    let loss = |z: f64| z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();

    let (logit, _, cache) = model.forward_train(&img)?;
    let grads = model.backward(&cache, sigmoid(logit) - target);
    println!(
        "model has {} parameters across {} tensors\n",
        param_count(&model),
        {
            let mut n = 0;
            model.visit_params(&mut |_, _| n += 1);
            n
        }
    );

    let mut names = Vec::new();
    grads.visit_params(&mut |n, _| names.push(n.to_string()));
    println!("{:<34} {:>14} {:>14} {:>9}", "parameter", "analytic", "finite-diff", "rel err");
    let mut worst = 0.0f64;
    for name in names.iter().step_by(3) {
        let mut g = None;
        grads.visit_params(&mut |n, t| {
            if n == name {
                g = Some(t.to_owned());
            }
        });
        let g = g.unwrap();
        let pick = rng.gen_range(0..g.len());
        let analytic = g.as_slice().unwrap()[pick];

        let h = 1e-5;
        let probe = |eps: f64| {
            let mut m = model.clone();
            m.visit_params_mut(&mut |n, mut t| {
                if n == name {
                    t.as_slice_mut().unwrap()[pick] += eps;
                }
            });
            let (z, _, _) = m.forward_train(&img).unwrap();
            loss(z)
        };
        let fd = (probe(h) - probe(-h)) / (2.0 * h);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(rel);
        println!("{name:<34} {analytic:>14.6e} {fd:>14.6e} {rel:>9.2e}");
    }
    println!("\nworst relative error: {worst:.2e}");
    assert!(worst < 1e-3);
    Ok(())
}
