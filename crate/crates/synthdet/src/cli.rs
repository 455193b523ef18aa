//! Command-line entry point: toy-data generation, training, evaluation,
//! single-image detection, and robustness sweeps behind one binary.
//!
//! Configuration is a flat TOML document per command. Precedence, lowest
//! to highest: built-in defaults, `--config` file, repeated `--set
//! key=value` overrides, then dedicated flags (`--seed`, `--manifest`,
//! `--checkpoint`, ...). Every file-producing command writes an
//! `effective_config.toml` snapshot of the merged result next to its
//! outputs, so a run is reproducible from the snapshot alone. Commands
//! write only under `--output-dir`.
//!
//! Exit codes: 0 success, 1 runtime failure (one JSON diagnostic line on
//! stderr), 2 command-line usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::affm::{FusionConfig, FusionPool};
use crate::core::load_image;
use crate::dataset::{generate_toy_dataset, read_manifest, AugmentationConfig, ToyConfig};
use crate::detector::{DetectorConfig, DetectorModel};
use crate::error::{Error, Result};
use crate::evaluator::{
    evaluate, robustness_sweep, score_entries, write_scores, RobustnessSweepConfig,
};
use crate::psm::default_window_specs;
use crate::trainer::{train, LrSchedule, OptimizerKind, TrainConfig};

#[derive(Parser)]
#[command(
    name = "synthdet",
    about = "Two-branch synthesized-image detector: global features fused with \
             auto-selected patch features",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural toy dataset (smooth fields vs planted
    /// checkerboard artifacts).
    GenToy(CommonArgs),
    /// Train a detector on a manifest.
    Train(TrainArgs),
    /// Score a manifest and write the metric report.
    Eval(EvalArgs),
    /// Score one image and print its fake probability and patch rects.
    Detect(DetectArgs),
    /// Global AP under blur and JPEG degradations.
    Robustness(EvalArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat TOML config file for this command.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set epochs=5 (repeatable). Values
    /// parse as TOML; unparseable values are taken as strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed override (commands with a `seed` config key: gen-toy, train).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for all outputs of this run.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker threads for data loading/scoring (and training gradient
    /// chunks). Defaults to the `workers` config key where one exists,
    /// otherwise to the available cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training manifest (JSONL).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Optional validation manifest; its AP is logged each epoch.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Initialize weights from an existing checkpoint instead of from the
    /// seed (the checkpoint's architecture wins).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Image to score.
    #[arg(long)]
    image: Option<PathBuf>,
}

/// Entry point. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let line = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{line}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenToy(common) => cmd_gen_toy(common),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Robustness(args) => cmd_robustness(args),
    }
}

/// Merges defaults <- config file <- --set overrides into a TOML table,
/// rejecting keys the command does not define, then deserializes it.
/// Returns the typed config together with the merged table (the snapshot).
fn load_config<C>(args: &CommonArgs) -> Result<(C, toml::Table)>
where
    C: Default + Serialize + DeserializeOwned,
{
    let defaults = toml::Table::try_from(C::default())
        .map_err(|e| Error::invalid(format!("default config: {e}")))?;
    let mut table = defaults.clone();

    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file_table: toml::Table =
            text.parse().map_err(|e| Error::format(path, format!("{e}")))?;
        for (k, v) in file_table {
            if !defaults.contains_key(&k) {
                return Err(Error::format(path, format!("unknown config key `{k}`")));
            }
            table.insert(k, v);
        }
    }
    for spec in &args.set {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--set needs KEY=VALUE, got `{spec}`")))?;
        let key = key.trim();
        if !defaults.contains_key(key) {
            return Err(Error::invalid(format!("--set references unknown config key `{key}`")));
        }
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").unwrap(),
            Err(_) => toml::Value::String(raw.trim().to_string()),
        };
        table.insert(key.to_string(), value);
    }
    if let Some(seed) = args.seed {
        if table.contains_key("seed") {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
    }
    let cfg: C = table
        .clone()
        .try_into()
        .map_err(|e| Error::invalid(format!("config: {e}")))?;
    Ok((cfg, table))
}

fn require_output_dir(args: &CommonArgs) -> Result<&Path> {
    args.output_dir
        .as_deref()
        .ok_or_else(|| Error::invalid("--output-dir is required for this command"))
}

fn write_snapshot(output_dir: &Path, table: &toml::Table) -> Result<()> {
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let path = output_dir.join("effective_config.toml");
    let text = toml::to_string_pretty(table)
        .map_err(|e| Error::invalid(format!("config snapshot: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Applies --workers to the global scoring pool. Safe to call repeatedly;
/// later calls cannot resize an existing pool and say so.
fn configure_pool(workers: Option<usize>) {
    if let Some(n) = workers.filter(|n| *n > 0) {
        let result = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        if result.is_err() && rayon::current_num_threads() != n {
            eprintln!(
                "warning: worker pool already running with {} threads; --workers {n} ignored \
                 for scoring (training chunking still honors it)",
                rayon::current_num_threads()
            );
        }
    }
}

fn cmd_gen_toy(common: CommonArgs) -> Result<()> {
    let (cfg, table) = load_config::<ToyConfig>(&common)?;
    let out = require_output_dir(&common)?;
    write_snapshot(out, &table)?;
    generate_toy_dataset(&cfg, out)?;
    println!(
        "wrote {} real + {} fake images under {}",
        cfg.n_real,
        cfg.n_fake,
        out.display()
    );
    Ok(())
}

/// Flat training configuration: model knobs plus optimizer schedule.
/// Window geometry stays at the library defaults (three 3x3/224px windows
/// and three 2x2/112px windows); use the library API for custom layouts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCliConfig {
    pub architecture: String,
    pub embedding_dim: usize,
    pub shared_local_weights: bool,
    pub iou_threshold: f64,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub fusion_residual_norm: bool,
    pub fusion_scale_by_model_dim: bool,
    pub fusion_pool: String,
    pub batch_size: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub augment_fraction: f64,
    pub blur_sigma_max: f64,
    pub jpeg_quality_min: u8,
    pub jpeg_quality_max: u8,
    /// Gradient-chunk workers; part of the config because the chunked
    /// reduction order (and thus bit-for-bit reproducibility) depends on it.
    pub workers: usize,
    /// Input paths; empty means "must come from the matching flag".
    pub manifest: String,
    pub val_manifest: String,
    pub checkpoint: String,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let f = FusionConfig::default();
        let t = TrainConfig::default();
        let a = AugmentationConfig::default();
        TrainCliConfig {
            architecture: b.architecture,
            embedding_dim: b.embedding_dim,
            shared_local_weights: b.shared_local_weights,
            iou_threshold: crate::psm::DEFAULT_IOU_THRESHOLD,
            fusion_layers: f.layers,
            fusion_heads: f.heads,
            fusion_residual_norm: f.residual_norm,
            fusion_scale_by_model_dim: f.scale_by_model_dim,
            fusion_pool: "flatten".into(),
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            epochs: t.epochs,
            seed: t.seed,
            augment_fraction: a.apply_fraction,
            blur_sigma_max: a.blur_sigma_max,
            jpeg_quality_min: a.jpeg_quality_min,
            jpeg_quality_max: a.jpeg_quality_max,
            workers: 1,
            manifest: String::new(),
            val_manifest: String::new(),
            checkpoint: String::new(),
        }
    }
}

impl TrainCliConfig {
    pub fn detector_config(&self) -> Result<DetectorConfig> {
        let pool = match self.fusion_pool.as_str() {
            "flatten" => FusionPool::Flatten,
            "mean_tokens" => FusionPool::MeanTokens,
            "global_token" => FusionPool::GlobalToken,
            other => {
                return Err(Error::invalid(format!(
                    "fusion_pool `{other}` (expected flatten, mean_tokens, or global_token)"
                )))
            }
        };
        Ok(DetectorConfig {
            backbone: BackboneConfig {
                architecture: self.architecture.clone(),
                embedding_dim: self.embedding_dim,
                shared_local_weights: self.shared_local_weights,
            },
            window_specs: default_window_specs(),
            iou_threshold: self.iou_threshold,
            fusion: FusionConfig {
                layers: self.fusion_layers,
                heads: self.fusion_heads,
                residual_norm: self.fusion_residual_norm,
                scale_by_model_dim: self.fusion_scale_by_model_dim,
                pool,
            },
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            epochs: self.epochs,
            seed: self.seed,
            augmentation: AugmentationConfig {
                apply_fraction: self.augment_fraction,
                blur_sigma_max: self.blur_sigma_max,
                jpeg_quality_min: self.jpeg_quality_min,
                jpeg_quality_max: self.jpeg_quality_max,
            },
            optimizer: OptimizerKind::AdaptiveMoment,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

fn merge_path(
    table: &mut toml::Table,
    key: &str,
    flag: &Option<PathBuf>,
    cfg_value: &str,
) -> Option<PathBuf> {
    let chosen = flag.clone().or_else(|| {
        if cfg_value.is_empty() {
            None
        } else {
            Some(PathBuf::from(cfg_value))
        }
    });
    if let Some(p) = &chosen {
        table.insert(key.to_string(), toml::Value::String(p.display().to_string()));
    }
    chosen
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (mut cfg, mut table) = load_config::<TrainCliConfig>(&args.common)?;
    if let Some(w) = args.common.workers {
        cfg.workers = w.max(1);
        table.insert("workers".into(), toml::Value::Integer(cfg.workers as i64));
    }
    let manifest = merge_path(&mut table, "manifest", &args.manifest, &cfg.manifest)
        .ok_or_else(|| Error::invalid("train needs --manifest (or a manifest config key)"))?;
    let val_manifest =
        merge_path(&mut table, "val_manifest", &args.val_manifest, &cfg.val_manifest);
    let init_checkpoint =
        merge_path(&mut table, "checkpoint", &args.checkpoint, &cfg.checkpoint);

    let out = require_output_dir(&args.common)?;
    write_snapshot(out, &table)?;
    configure_pool(Some(cfg.workers));

    let entries = read_manifest(&manifest)?;
    let val_entries = val_manifest.map(read_manifest).transpose()?;
    let mut model = match &init_checkpoint {
        Some(p) => DetectorModel::load_checkpoint(p)?,
        None => DetectorModel::new(&cfg.detector_config()?, cfg.seed)?,
    };
    let summary = train(
        &mut model,
        &entries,
        val_entries.as_deref(),
        &cfg.train_config(),
        out,
        cfg.workers,
    )?;
    println!(
        "trained {} epochs ({} steps); final train accuracy {:.4}{}; checkpoint {}",
        cfg.epochs,
        summary.records.len(),
        summary.final_train_accuracy,
        match summary.final_val_ap {
            Some(ap) => format!("; val AP {ap:.4}"),
            None => String::new(),
        },
        summary.final_checkpoint.display()
    );
    Ok(())
}

/// Evaluation/robustness configuration; inputs may come from flags or from
/// these keys (empty path = flag required). The sweep lists are only read
/// by the robustness command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCliConfig {
    pub manifest: String,
    pub checkpoint: String,
    pub blur_sigmas: Vec<f64>,
    pub jpeg_qualities: Vec<u8>,
}

impl Default for EvalCliConfig {
    fn default() -> Self {
        let sweep = RobustnessSweepConfig::default();
        EvalCliConfig {
            manifest: String::new(),
            checkpoint: String::new(),
            blur_sigmas: sweep.blur_sigmas,
            jpeg_qualities: sweep.jpeg_qualities,
        }
    }
}

fn load_eval_inputs(args: &EvalArgs) -> Result<(DetectorModel, Vec<crate::dataset::ManifestEntry>, toml::Table)> {
    let (cfg, mut table) = load_config::<EvalCliConfig>(&args.common)?;
    let manifest = merge_path(&mut table, "manifest", &args.manifest, &cfg.manifest)
        .ok_or_else(|| Error::invalid("this command needs --manifest"))?;
    let checkpoint = merge_path(&mut table, "checkpoint", &args.checkpoint, &cfg.checkpoint)
        .ok_or_else(|| Error::invalid("this command needs --checkpoint"))?;
    configure_pool(args.common.workers);
    let model = DetectorModel::load_checkpoint(&checkpoint)?;
    let entries = read_manifest(&manifest)?;
    Ok((model, entries, table))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let out = require_output_dir(&args.common)?.to_path_buf();
    let (model, entries, table) = load_eval_inputs(&args)?;
    write_snapshot(&out, &table)?;

    let scored = score_entries(&model, &entries)?;
    write_scores(out.join("scores.jsonl"), &scored)?;
    let report = evaluate(&model, &entries)?;
    let report_path = out.join("report.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::format(&report_path, format!("{e}")))?;
    std::fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    println!(
        "n={} global_ap={:.6} total_map={:.6} ({} models, {} families; report {})",
        report.n_images,
        report.global_ap,
        report.total_map,
        report.per_model_ap.len(),
        report.per_family_map.len(),
        report_path.display()
    );
    Ok(())
}

/// The single detection line: image path, fake probability, and the
/// selected crop rectangles as `x,y,w,h` groups.
pub fn format_detection(
    path: &Path,
    score: f64,
    proposals: &[crate::psm::PatchProposal],
) -> String {
    let rects: Vec<String> = proposals
        .iter()
        .filter_map(|p| p.crop_rect)
        .map(|r| format!("{},{},{},{}", r.x, r.y, r.w, r.h))
        .collect();
    format!("{}\t{:.6}\t{}", path.display(), score, rects.join(";"))
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    #[derive(Debug, Clone, Default, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct DetectCliConfig {
        checkpoint: String,
        image: String,
    }
    let (cfg, mut table) = load_config::<DetectCliConfig>(&args.common)?;
    let checkpoint = merge_path(&mut table, "checkpoint", &args.checkpoint, &cfg.checkpoint)
        .ok_or_else(|| Error::invalid("detect needs --checkpoint"))?;
    let image_path = merge_path(&mut table, "image", &args.image, &cfg.image)
        .ok_or_else(|| Error::invalid("detect needs --image"))?;

    let model = DetectorModel::load_checkpoint(&checkpoint)?;
    let img = load_image(&image_path)?;
    let (score, proposals) = model.forward(&img)?;
    println!("{}", format_detection(&image_path, score, &proposals));

    if let Some(out) = &args.common.output_dir {
        write_snapshot(out, &table)?;
        let record = serde_json::json!({
            "image": image_path.display().to_string(),
            "score": score,
            "proposals": proposals,
        });
        let path = out.join("detection.json");
        std::fs::write(&path, format!("{record:#}"))
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn cmd_robustness(args: EvalArgs) -> Result<()> {
    let out = require_output_dir(&args.common)?.to_path_buf();
    let (cfg, mut table) = load_config::<EvalCliConfig>(&args.common)?;
    let manifest = merge_path(&mut table, "manifest", &args.manifest, &cfg.manifest)
        .ok_or_else(|| Error::invalid("robustness needs --manifest"))?;
    let checkpoint = merge_path(&mut table, "checkpoint", &args.checkpoint, &cfg.checkpoint)
        .ok_or_else(|| Error::invalid("robustness needs --checkpoint"))?;
    write_snapshot(&out, &table)?;
    configure_pool(args.common.workers);

    let model = DetectorModel::load_checkpoint(&checkpoint)?;
    let entries = read_manifest(&manifest)?;
    let sweep = RobustnessSweepConfig {
        blur_sigmas: cfg.blur_sigmas.clone(),
        jpeg_qualities: cfg.jpeg_qualities.clone(),
    };
    let curves = robustness_sweep(&model, &entries, &sweep)?;

    let report = serde_json::json!({
        "n_images": entries.len(),
        "curves": curves,
        "config": model.config,
    });
    let path = out.join("robustness.json");
    std::fs::write(&path, format!("{report:#}")).map_err(|e| Error::io(&path, e))?;
    for (name, curve) in &curves {
        let points: Vec<String> =
            curve.iter().map(|(p, ap)| format!("{p}:{ap:.4}")).collect();
        println!("{name}: {}", points.join(" "));
    }
    println!("curves written to {}", path.display());
    Ok(())
}
