//! Watch the patch selector find a planted artifact: build a fake toy
//! image, push it through a backbone, and print the sliding-window scores
//! and the crops that survive suppression.
//!
//! Usage: cargo run --example patch_selection

use synthdet::backbone::{Backbone, BackboneConfig};
use synthdet::core::load_image;
use synthdet::dataset::{generate_toy_dataset, read_artifact_sidecar, ToyConfig};
use synthdet::psm::{
    activation_map, default_window_specs, select_patches, window_scores, DEFAULT_IOU_THRESHOLD,
};
use synthdet::rng::{derive_rng, tag};

fn main() -> synthdet::Result<()> {
    let out = "target/example_out/patch_selection";
    let cfg = ToyConfig { n_real: 1, n_fake: 1, image_size: 224, artifact_size: 24, seed: 40 };
    generate_toy_dataset(&cfg, out)?;
    let artifact = &read_artifact_sidecar(format!("{out}/artifacts.jsonl"))?[0];
    let img = load_image(format!("{out}/{}", artifact.path))?;
    println!(
        "planted artifact: x={} y={} ({}x{})",
        artifact.x, artifact.y, artifact.w, artifact.h
    );

    let mut rng = derive_rng(40, &[tag("example-backbone")]);
    let backbone = Backbone::new(
        &BackboneConfig { architecture: "reduced".into(), ..Default::default() },
        &mut rng,
    )?;
    let feat = backbone.extract(&img)?.feature_map;
    let act = activation_map(&feat);
    println!("\nactivation map (channel sum over the 7x7 feature map):");
    for y in 0..7 {
        let row: Vec<String> =
            (0..7).map(|x| format!("{:7.2}", act.data[[y, x]])).collect();
        println!("  {}", row.join(" "));
    }

    let specs = default_window_specs();
    for spec in &specs {
        let scored = window_scores(&act, spec)?;
        let best = scored
            .iter()
            .max_by(|a, b| a.score.total_cmp(&b.score))
            .unwrap();
        println!(
            "\n{}x{} windows (patch {} px): {} positions, best at cell ({}, {}) score {:.2}",
            spec.height,
            spec.width,
            spec.patch_px,
            scored.len(),
            best.window_x,
            best.window_y,
            best.score
        );
    }

    let (patches, proposals) =
        select_patches(&feat, &img, &specs, DEFAULT_IOU_THRESHOLD, 224)?;
    println!("\nselected {} patches after suppression:", patches.len());
    for p in &proposals {
        let r = p.crop_rect.unwrap();
        let hit = r.x < artifact.x + artifact.w
            && artifact.x < r.x + r.w
            && r.y < artifact.y + artifact.h
            && artifact.y < r.y + r.h;
        println!(
            "  window ({},{}) {}x{} -> crop x={} y={} {}x{}  score {:.2}{}",
            p.window_x,
            p.window_y,
            p.window_w,
            p.window_h,
            r.x,
            r.y,
            r.w,
            r.h,
            p.score,
            if hit { "  [intersects artifact]" } else { "" }
        );
    }
    Ok(())
}
