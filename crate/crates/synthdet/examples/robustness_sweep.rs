//! Measure how detection AP degrades when test images are blurred or
//! JPEG-compressed. The sigma-0 point is an exact identity, so the curve
//! starts at the clean global AP.
//!
//! Usage: cargo run --example robustness_sweep [checkpoint manifest]
//! With no arguments it trains a throwaway tiny model on toy data.

use synthdet::dataset::{generate_toy_dataset, read_manifest, ToyConfig};
use synthdet::detector::{test_config, DetectorModel};
use synthdet::evaluator::{robustness_sweep, RobustnessSweepConfig};
use synthdet::trainer::{train, TrainConfig};

fn main() -> synthdet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, entries) = if let [ckpt, manifest] = args.as_slice() {
        (DetectorModel::load_checkpoint(ckpt)?, read_manifest(manifest)?)
    } else {
        let out = "target/example_out/robustness_sweep";
        println!("no checkpoint given; training a tiny throwaway model first");
        generate_toy_dataset(
            &ToyConfig { n_real: 12, n_fake: 12, image_size: 224, artifact_size: 16, seed: 90 },
            format!("{out}/data"),
        )?;
        let entries = read_manifest(format!("{out}/data/manifest.jsonl"))?;
        let mut model = DetectorModel::new(&test_config(), 90)?;
        let cfg = TrainConfig { batch_size: 12, epochs: 2, seed: 90, ..Default::default() };
        train(&mut model, &entries, None, &cfg, format!("{out}/run"), 1)?;
        (model, entries)
    };

    let cfg = RobustnessSweepConfig {
        blur_sigmas: vec![0.0, 1.0, 2.0],
        jpeg_qualities: vec![100, 70, 30],
    };
    println!("\nsweeping {} images x {} perturbation settings...",
        entries.len(),
        cfg.blur_sigmas.len() + cfg.jpeg_qualities.len()
    );
    let curves = robustness_sweep(&model, &entries, &cfg)?;
    for (name, curve) in &curves {
        println!("\n{name}:");
        for (param, ap) in curve {
            let bar_len = (ap * 40.0).round() as usize;
            println!("  {param:>5}  AP {ap:.4}  {}", "#".repeat(bar_len));
        }
    }
    println!("\nthe first blur row (sigma 0) equals the clean AP exactly.");
    Ok(())
}
