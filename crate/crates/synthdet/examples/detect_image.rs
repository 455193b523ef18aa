//! Score a single image with a trained detector: fake probability plus the
//! patch rectangles the selector chose, and where the gradient-free
//! selection placed them relative to a known planted artifact.
//!
//! Usage: cargo run --example detect_image [checkpoint image]
//! With no arguments it builds a fresh tiny model and a toy fake image.

use synthdet::core::load_image;
use synthdet::dataset::{generate_toy_dataset, read_artifact_sidecar, ToyConfig};
use synthdet::detector::{test_config, DetectorModel};

fn main() -> synthdet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, image_path, artifact) = if let [ckpt, image] = args.as_slice() {
        (DetectorModel::load_checkpoint(ckpt)?, image.clone(), None)
    } else {
        let out = "target/example_out/detect_image";
        generate_toy_dataset(
            &ToyConfig { n_real: 1, n_fake: 1, image_size: 224, artifact_size: 24, seed: 80 },
            out,
        )?;
        let artifact = read_artifact_sidecar(format!("{out}/artifacts.jsonl"))?.remove(0);
        let image = format!("{out}/{}", artifact.path);
        (DetectorModel::new(&test_config(), 80)?, image, Some(artifact))
    };

    let img = load_image(&image_path)?;
    let (score, proposals) = model.forward(&img)?;
    println!("{image_path}");
    println!("fake probability: {score:.6}");
    println!("selected patches:");
    for p in &proposals {
        let r = p.crop_rect.unwrap();
        let note = artifact
            .as_ref()
            .filter(|a| {
                r.x < a.x + a.w && a.x < r.x + r.w && r.y < a.y + a.h && a.y < r.y + r.h
            })
            .map(|_| "  <- covers the planted artifact")
            .unwrap_or("");
        println!(
            "  {}px window at cell ({},{}) -> x={} y={} w={} h={}{}",
            p.patch_px, p.window_x, p.window_y, r.x, r.y, r.w, r.h, note
        );
    }
    if let Some(a) = &artifact {
        println!("planted artifact was at x={} y={} ({}x{})", a.x, a.y, a.w, a.h);
    }
    Ok(())
}
