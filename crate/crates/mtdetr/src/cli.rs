//! Command-line entry points: data generation, burn-in, transfer,
//! evaluation, ablation sweeps, and overlay rendering.
//!
//! Exit codes: 0 success, 1 usage/config errors, 2 runtime errors.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::Digest;

use crate::checkpoint::Checkpoint;
use crate::config::{Components, TrainConfig};
use crate::data::{generate_synthetic_dataset, Dataset, Domain, GenConfig, ShiftConfig};
use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::mean_teacher::{generate_pseudo_labels, predict, MeanTeacherPair};
use crate::training::ablate::{run_ablation, AblationData};
use crate::training::{
    burn_in, evaluate_map_at, init_transfer, transfer_train, TrainContext,
};
use crate::viz::composite_panels;

#[derive(Parser, Debug)]
#[command(name = "mtdetr", version, about = "Mean-teacher domain-adaptive detection transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic domain-shift benchmark (three splits).
    GenData(GenDataArgs),
    /// Supervised burn-in training on labeled source data.
    BurnIn(BurnInArgs),
    /// Mean-teacher transfer training from a burn-in checkpoint.
    Transfer(TransferArgs),
    /// Evaluate a checkpoint on a split (mAP at an IoU threshold).
    Eval(EvalArgs),
    /// Train each configuration of a component sweep and compare.
    Ablate(AblateArgs),
    /// Render ground-truth / prediction / pseudo-label overlay panels.
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output root; receives source-train/, target-train/, target-val/.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub n_source: usize,
    #[arg(long, default_value_t = 200)]
    pub n_target: usize,
    #[arg(long, default_value_t = 100)]
    pub n_val: usize,
    /// Fog intensity of the target corruption, in [0,1].
    #[arg(long, default_value_t = 0.6)]
    pub fog: f32,
    /// Per-channel color offsets "r,g,b", each in [-0.3, 0.3].
    #[arg(long, default_value = "0.06,0.02,-0.08", allow_hyphen_values = true)]
    pub color_shift: String,
    /// Gaussian blur sigma in pixels.
    #[arg(long, default_value_t = 0.4)]
    pub blur: f32,
}

/// Flags that override config-file values (CLI > file > built-in default).
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub burn_in_epochs: Option<usize>,
    #[arg(long)]
    pub transfer_epochs: Option<usize>,
    #[arg(long)]
    pub lr_burn_in: Option<f64>,
    #[arg(long)]
    pub lr_transfer: Option<f64>,
}

impl ConfigOverrides {
    pub fn apply(&self, mut cfg: TrainConfig) -> Result<TrainConfig> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.burn_in_epochs {
            cfg.burn_in_epochs = v;
        }
        if let Some(v) = self.transfer_epochs {
            cfg.transfer_epochs = v;
        }
        if let Some(v) = self.lr_burn_in {
            cfg.lr_burn_in = v;
        }
        if let Some(v) = self.lr_transfer {
            cfg.lr_transfer = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct BurnInArgs {
    /// TOML training config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Source-train split (directory or manifest.json).
    #[arg(long)]
    pub source: PathBuf,
    /// Target-train split (unlabeled side of the adversarial terms).
    #[arg(long)]
    pub target: PathBuf,
    /// Target-val split; defaults to the sibling `target-val` directory.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Component set (preset name or `+`-joined tokens).
    #[arg(long, default_value = "full")]
    pub components: String,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Burn-in student checkpoint that initializes both models.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "full")]
    pub components: String,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Split to evaluate (directory or manifest.json).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou_thresh: f64,
    /// Also print one AP row per class.
    #[arg(long, default_value_t = false)]
    pub per_class: bool,
    /// Optional directory for the text report and reproducibility stamp.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Comma-separated configurations: presets (source-only, mt-only, full,
    /// no-shared-qe) or `+`-joined component tokens.
    #[arg(long)]
    pub components: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root containing source-train/, target-train/, target-val/.
    #[arg(long)]
    pub data_root: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds per configuration (seed, seed+1, ...).
    #[arg(long, default_value_t = 3)]
    pub n_seeds: usize,
    /// Train arms on separate threads (each arm stays seed-isolated).
    #[arg(long, default_value_t = false)]
    pub parallel: bool,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    /// Student checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Teacher checkpoint; defaults to --ckpt.
    #[arg(long)]
    pub teacher_ckpt: Option<PathBuf>,
    /// Target split to render.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n_images: usize,
    /// Selection seed for which images get rendered.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pseudo-label threshold override; checkpoint config value when absent.
    #[arg(long)]
    pub tau: Option<f64>,
}

/// Reproducibility stamp: config snapshot, seed, and a content hash of the
/// code version string. Deliberately contains no timestamps so identical
/// invocations produce identical artifacts.
pub fn write_stamp(
    out_dir: &Path,
    command: &str,
    config: &serde_json::Value,
    seed: u64,
) -> Result<()> {
    let version = env!("CARGO_PKG_VERSION");
    let hash = sha2::Sha256::digest(version.as_bytes());
    let stamp = serde_json::json!({
        "command": command,
        "seed": seed,
        "code_version": version,
        "code_version_sha256": format!("{hash:x}"),
        "config": config,
    });
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("run_stamp.json");
    std::fs::write(&path, serde_json::to_string_pretty(&stamp).unwrap())
        .map_err(|e| Error::io(path, e))
}

fn parse_color_shift(s: &str) -> Result<[f32; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Usage(format!(
            "--color-shift expects three comma-separated values, got '{s}'"
        )));
    }
    let mut out = [0.0f32; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("--color-shift component '{p}' is not a number")))?;
    }
    Ok(out)
}

fn load_config(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<TrainConfig> {
    let base = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    overrides.apply(base)
}

/// Default the validation split to the sibling `target-val` of the target
/// split when present.
fn resolve_val(target: &Path, explicit: Option<&Path>) -> Option<PathBuf> {
    if let Some(v) = explicit {
        return Some(v.to_path_buf());
    }
    let split_dir = if target.is_dir() {
        target.to_path_buf()
    } else {
        target.parent()?.to_path_buf()
    };
    let sibling = split_dir.parent()?.join("target-val");
    sibling.join("manifest.json").exists().then_some(sibling)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let shift = ShiftConfig {
        fog_intensity: args.fog,
        color_shift: parse_color_shift(&args.color_shift)?,
        blur_radius: args.blur,
        seed: args.seed,
    };
    let cfg = GenConfig {
        n_train_source: args.n_source,
        n_train_target: args.n_target,
        n_val_target: args.n_val,
        image_size: args.image_size,
        n_classes: args.classes,
        shift,
        seed: args.seed,
    };
    let manifests = generate_synthetic_dataset(&args.out, &cfg)?;
    write_stamp(
        &args.out,
        "gen-data",
        &serde_json::json!({
            "n_source": cfg.n_train_source,
            "n_target": cfg.n_train_target,
            "n_val": cfg.n_val_target,
            "image_size": cfg.image_size,
            "n_classes": cfg.n_classes,
            "shift": cfg.shift,
        }),
        args.seed,
    )?;
    for m in &manifests {
        println!("{}", m.manifest_path().display());
    }
    Ok(())
}

pub fn cmd_burn_in(args: &BurnInArgs) -> Result<()> {
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    let components = Components::parse(&args.components)?;
    let source = Dataset::load(&args.source, Domain::Source)?;
    let target = Dataset::load(&args.target, Domain::Target)?;
    let val = resolve_val(&args.target, args.val.as_deref())
        .map(|p| Dataset::load(&p, Domain::Target))
        .transpose()?;
    let detector = Detector::new(DetectorConfig {
        n_classes: source.n_classes(),
        ..DetectorConfig::default()
    })?;
    let ctx = TrainContext {
        detector: &detector,
        config: &config,
        components,
        source: &source,
        target: &target,
        val: val.as_ref(),
    };
    let (state, report) = burn_in(&ctx)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    Checkpoint::new(
        state.params.clone(),
        "burn_in",
        config.seed,
        state.next_epoch,
        config.clone(),
        detector.cfg.clone(),
    )
    .with_optimizer(&state.adam)
    .save(&args.out.join("burn_in.ckpt"))?;
    report.write_jsonl(&args.out.join("burn_in_report.jsonl"))?;
    report.write_summary(&args.out.join("burn_in_summary.json"))?;
    write_stamp(
        &args.out,
        "burn-in",
        &serde_json::to_value(&config).unwrap(),
        config.seed,
    )?;
    if let Some(r) = report.records.last() {
        println!(
            "burn-in done: {} epochs, det_loss {:.4}, val mAP50 {}",
            r.epoch,
            r.det_loss,
            r.map50_student_val
                .map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

pub fn cmd_transfer(args: &TransferArgs) -> Result<()> {
    if !args.init.exists() {
        return Err(Error::Usage(format!(
            "--init checkpoint {} does not exist",
            args.init.display()
        )));
    }
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    let components = Components::parse(&args.components)?;
    let source = Dataset::load(&args.source, Domain::Source)?;
    let target = Dataset::load(&args.target, Domain::Target)?;
    let val = resolve_val(&args.target, args.val.as_deref())
        .map(|p| Dataset::load(&p, Domain::Target))
        .transpose()?;
    let ckpt = Checkpoint::load(&args.init)?;
    let detector = Detector::new(ckpt.model_config.clone())?;
    ckpt.validate_against(&detector)?;
    let ctx = TrainContext {
        detector: &detector,
        config: &config,
        components,
        source: &source,
        target: &target,
        val: val.as_ref(),
    };
    let mut state = init_transfer(&ctx, ckpt.params)?;
    let report = transfer_train(&ctx, &mut state)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    Checkpoint::new(
        state.pair.student.clone(),
        "transfer_student",
        config.seed,
        state.next_epoch,
        config.clone(),
        detector.cfg.clone(),
    )
    .with_optimizer(&state.adam)
    .save(&args.out.join("student.ckpt"))?;
    Checkpoint::new(
        state.pair.teacher_snapshot(),
        "transfer_teacher",
        config.seed,
        state.next_epoch,
        config.clone(),
        detector.cfg.clone(),
    )
    .save(&args.out.join("teacher.ckpt"))?;
    report.write_jsonl(&args.out.join("transfer_report.jsonl"))?;
    report.write_summary(&args.out.join("transfer_summary.json"))?;
    write_stamp(
        &args.out,
        "transfer",
        &serde_json::to_value(&config).unwrap(),
        config.seed,
    )?;
    if let Some(r) = report.records.last() {
        println!(
            "transfer done: {} epochs, student val mAP50 {}, teacher val mAP50 {}",
            r.epoch,
            r.map50_student_val
                .map_or("n/a".to_string(), |v| format!("{v:.4}")),
            r.map50_teacher_val
                .map_or("n/a".to_string(), |v| format!("{v:.4}")),
        );
    }
    Ok(())
}

/// Flat key-value text rendering of an eval result.
pub fn format_eval_report(
    result: &crate::eval::EvalResult,
    categories: &[(usize, String)],
    per_class: bool,
) -> String {
    let mut out = String::new();
    out.push_str(&format!("iou_thresh = {:.4}\n", result.iou_thresh));
    out.push_str(&format!("map = {:.6}\n", result.map));
    out.push_str(&format!("n_detections = {}\n", result.n_detections));
    if per_class {
        for (id, name) in categories {
            let ap = result.per_class_ap.get(id).copied().flatten();
            let gt = result.per_class_gt.get(id).copied().unwrap_or(0);
            match ap {
                Some(v) => out.push_str(&format!("ap.{name} = {v:.6} (gt {gt})\n")),
                None => out.push_str(&format!("ap.{name} = n/a (gt {gt})\n")),
            }
        }
    }
    out
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if !(args.iou_thresh > 0.0 && args.iou_thresh <= 1.0) {
        return Err(Error::Usage(format!(
            "--iou-thresh {} outside (0,1]",
            args.iou_thresh
        )));
    }
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let detector = Detector::new(ckpt.model_config.clone())?;
    ckpt.validate_against(&detector)?;
    let dataset = Dataset::load(&args.data, Domain::Target)?;
    let result = evaluate_map_at(&detector, &ckpt.params, &dataset, args.iou_thresh)?;
    let categories: Vec<(usize, String)> = dataset
        .manifest
        .categories
        .iter()
        .map(|c| (c.id, c.name.clone()))
        .collect();
    let text = format_eval_report(&result, &categories, args.per_class);
    print!("{text}");
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("eval_report.txt");
        std::fs::write(&path, &text).map_err(|e| Error::io(path, e))?;
        write_stamp(
            out,
            "eval",
            &serde_json::json!({
                "ckpt": args.ckpt.display().to_string(),
                "data": args.data.display().to_string(),
                "iou_thresh": args.iou_thresh,
            }),
            ckpt.seed,
        )?;
    }
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    if args.components.trim().is_empty() {
        return Err(Error::Usage("--components must not be empty".into()));
    }
    let configurations: Vec<Components> = args
        .components
        .split(',')
        .map(|s| Components::parse(s.trim()))
        .collect::<Result<Vec<_>>>()?;
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    let data = AblationData::load(&args.data_root)?;
    let detector = Detector::new(DetectorConfig {
        n_classes: data.source.n_classes(),
        ..DetectorConfig::default()
    })?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_stamp(
        &args.out,
        "ablate",
        &serde_json::json!({
            "config": config,
            "components": args.components,
            "n_seeds": args.n_seeds,
        }),
        config.seed,
    )?;
    let result = run_ablation(
        &detector,
        &config,
        &configurations,
        args.n_seeds,
        &data,
        Some(&args.out),
        args.parallel,
    )?;
    print!("{}", result.table());
    Ok(())
}

pub fn cmd_visualize(args: &VisualizeArgs) -> Result<()> {
    let student_ckpt = Checkpoint::load(&args.ckpt)?;
    let teacher_ckpt = match &args.teacher_ckpt {
        Some(p) => Checkpoint::load(p)?,
        None => student_ckpt.clone(),
    };
    let detector = Detector::new(student_ckpt.model_config.clone())?;
    student_ckpt.validate_against(&detector)?;
    teacher_ckpt.validate_against(&detector)?;
    let tau = args.tau.unwrap_or(student_ckpt.train_config.tau);
    // near-zero tau means "draw everything the teacher proposes"
    let effective_tau = tau.clamp(1e-9, 1.0 - 1e-9);
    let dataset = Dataset::load(&args.data, Domain::Target)?;

    // deterministic image selection under the given seed
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    use rand::seq::SliceRandom;
    let mut rng = crate::data::stream_rng(&[args.seed, 0x7152]);
    order.shuffle(&mut rng);
    order.truncate(args.n_images.min(dataset.len()));

    // a mean-teacher pair is the easiest way to reuse teacher inference
    let pair = MeanTeacherPair::from_maps(
        teacher_ckpt.params.clone(),
        teacher_ckpt.params,
        1.0,
        false,
    )?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for &i in &order {
        let (batch, _) = dataset.make_batch(&[i]);
        let student_pred = predict(&detector, &student_ckpt.params, &batch.pixels)?;
        let student_records = crate::eval::predictions_to_records(
            &student_pred,
            &batch.image_ids,
            detector.cfg.n_classes,
        );
        let teacher_pred = crate::mean_teacher::teacher_predict(&pair, &detector, &batch)?;
        let pseudo = generate_pseudo_labels(
            &teacher_pred,
            0,
            detector.cfg.n_classes,
            effective_tau,
            batch.image_ids[0],
        )?;
        let composite = composite_panels(
            dataset.image(i),
            dataset.annotations(i),
            &student_records,
            &pseudo,
            effective_tau,
        );
        let path = args.out.join(format!("vis_{}.png", batch.image_ids[0]));
        crate::viz::save_composite(&path, &composite)?;
    }
    write_stamp(
        &args.out,
        "visualize",
        &serde_json::json!({
            "ckpt": args.ckpt.display().to_string(),
            "n_images": args.n_images,
            "tau": tau,
        }),
        args.seed,
    )?;
    println!("wrote {} overlay images to {}", order.len(), args.out.display());
    Ok(())
}

/// Dispatch a parsed CLI invocation.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::BurnIn(args) => cmd_burn_in(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Visualize(args) => cmd_visualize(args),
    }
}
