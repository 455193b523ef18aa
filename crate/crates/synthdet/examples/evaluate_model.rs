//! Evaluate a checkpoint on a manifest: per-model AP, per-family mAP,
//! total mAP, global AP, and a per-image score dump that reproduces the
//! global AP exactly when re-read.
//!
//! Usage: cargo run --example evaluate_model [checkpoint manifest]
//! With no arguments it trains a throwaway tiny model first.

use synthdet::dataset::{generate_toy_dataset, read_manifest, ToyConfig};
use synthdet::detector::{test_config, DetectorModel};
use synthdet::evaluator::{average_precision, evaluate, read_scores, score_entries, write_scores};
use synthdet::trainer::{train, TrainConfig};

fn main() -> synthdet::Result<()> {
    let out = "target/example_out/evaluate_model";
    let args: Vec<String> = std::env::args().skip(1).collect();

    let (model, manifest_path) = if let [ckpt, manifest] = args.as_slice() {
        (DetectorModel::load_checkpoint(ckpt)?, manifest.clone())
    } else {
        println!("no checkpoint given; training a tiny throwaway model first\n");
        let data = format!("{out}/data");
        generate_toy_dataset(
            &ToyConfig { n_real: 16, n_fake: 16, image_size: 224, artifact_size: 16, seed: 70 },
            &data,
        )?;
        let entries = read_manifest(format!("{data}/manifest.jsonl"))?;
        let mut model = DetectorModel::new(&test_config(), 70)?;
        let cfg = TrainConfig { batch_size: 16, epochs: 2, seed: 70, ..Default::default() };
        train(&mut model, &entries, None, &cfg, format!("{out}/run"), 1)?;
        (model, format!("{data}/manifest.jsonl"))
    };

    let entries = read_manifest(&manifest_path)?;
    let report = evaluate(&model, &entries)?;
    println!("evaluated {} images", report.n_images);
    println!("global AP: {:.4}", report.global_ap);
    println!("total mAP: {:.4}", report.total_map);
    for (model_name, ap) in &report.per_model_ap {
        println!("  model {model_name}: AP {ap:.4}");
    }
    for (family, map) in &report.per_family_map {
        println!("  family {family}: mAP {map:.4}");
    }
    if !report.undefined_models.is_empty() {
        println!("  undefined (single-class) models: {:?}", report.undefined_models);
    }

    // The score dump is the report's ground truth: re-reading it yields the
    // same global AP bit for bit.
    let scored = score_entries(&model, &entries)?;
    let dump = format!("{out}/scores.jsonl");
    std::fs::create_dir_all(out).ok();
    write_scores(&dump, &scored)?;
    let back = read_scores(&dump)?;
    let scores: Vec<f64> = back.iter().map(|s| s.score).collect();
    let labels: Vec<_> = back.iter().map(|s| s.label).collect();
    let recomputed = average_precision(&scores, &labels)?;
    assert_eq!(recomputed, report.global_ap);
    println!("\nscore dump {dump} recomputes global AP exactly: {recomputed:.4}");
    Ok(())
}
