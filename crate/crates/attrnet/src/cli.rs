//! Command-line interface: dataset generation, training, evaluation,
//! prediction and attention-map export. Exit codes: 0 success, 2
//! configuration/usage error, 3 I/O or file-format error, 4 numeric
//! failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{excitation_map, export_heatmap, AttentionMeta, INPUT_LAYER};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{
    augment, generate_synthetic, load_manifest, preprocess, write_manifest, AugmentMode, Dataset,
    ImageBuf, Split, SyntheticConfig, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::{evaluate, CropMode};
use crate::model::{build_tinydan, initialize, LayerKind};
use crate::tensor::Tensor;
use crate::trainer::{history_to_csv, train, PhaseMode, TrainerConfig};

#[derive(Parser)]
#[command(
    name = "attrnet",
    about = "Multi-label visual attribute classifier: data generation, training, evaluation, prediction and attention maps",
    version
)]
pub struct Cli {
    /// Cap the worker thread pool (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic attribute dataset (images + manifest + schema).
    GenData(GenDataArgs),
    /// Train the network and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Print the top-scoring attributes for one image.
    Predict(PredictArgs),
    /// Export an attention heatmap for one attribute of one image.
    Attend(AttendArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Training images.
    #[arg(long, default_value_t = 256)]
    train: usize,
    /// Validation images.
    #[arg(long, default_value_t = 64)]
    val: usize,
    /// Test images.
    #[arg(long, default_value_t = 64)]
    test: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: u32,
    /// Background clutter level in [0, 1].
    #[arg(long, default_value_t = 0.3)]
    clutter: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (containing manifest.csv and schema.json).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path; history.csv is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Maximum training epochs.
    #[arg(long, default_value_t = 38)]
    epochs: u32,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Base learning rate.
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    weight_decay: f64,
    /// Dropout rate for the fully-connected layers.
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Factor dividing the learning rate on a validation plateau.
    #[arg(long, default_value_t = 10.0)]
    lr_drop_factor: f64,
    /// Epochs without validation improvement before a plateau triggers.
    #[arg(long, default_value_t = 3)]
    patience: u32,
    /// Train the head first, then unfreeze the last conv block on plateau.
    #[arg(long)]
    two_phase: bool,
    /// Crop train/val images to their bbox (with 10% margin).
    #[arg(long)]
    crop_train: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Resize target before cropping to the model input.
    #[arg(long, default_value_t = 72)]
    canonical: u32,
    /// Model input side (divisible by 16).
    #[arg(long, default_value_t = 64)]
    crop: u32,
    /// Start from the conv stack and fc6 of an existing checkpoint.
    #[arg(long)]
    warm_start: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// whole: entire image; bbox: crop to bbox + 10% margin.
    #[arg(long, default_value = "whole")]
    crop: String,
    /// Metrics report JSON output path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// PR/ROC curve CSV output path.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// How many top attributes to print.
    #[arg(long, default_value_t = 3)]
    top: usize,
}

#[derive(Args)]
struct AttendArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Attribute class name to localize.
    #[arg(long = "class")]
    class_name: String,
    /// Readout layer: a conv layer name or "input" (default: first conv).
    #[arg(long)]
    layer: Option<String>,
    /// Overlay output path; the grayscale map and metadata JSON are
    /// written next to it.
    #[arg(long)]
    out: PathBuf,
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 0 for --help/--version, 2 for usage errors
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Attend(args) => cmd_attend(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let config = SyntheticConfig::new(
        args.train,
        args.val,
        args.test,
        args.size,
        args.clutter,
        args.seed,
    );
    let dataset = generate_synthetic(&config)?;
    write_manifest(&args.out, &dataset)?;

    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{}: {} images", split.as_str(), dataset.split_len(split));
    }
    let names = dataset.schema.class_names();
    let mut positives = vec![0usize; names.len()];
    for rec in &dataset.records {
        for (i, &v) in rec.labels.iter().enumerate() {
            if v == 1 {
                positives[i] += 1;
            }
        }
    }
    for (name, count) in names.iter().zip(&positives) {
        println!("class {name}: {count} positive");
    }
    println!("wrote {}", args.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    load_manifest(&dir.join(MANIFEST_FILE))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if args.crop == 0 || !args.crop.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "--crop must be a positive multiple of 16, got {}",
            args.crop
        )));
    }
    let dataset = load_dataset(&args.data)?;
    let num_classes = dataset.schema.num_classes();
    let model = build_tinydan(num_classes, (3, args.crop as usize, args.crop as usize))?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut params = initialize::<f32, _>(&model, &mut rng)?;

    if let Some(warm_path) = &args.warm_start {
        let warm = load_checkpoint(warm_path)?;
        if warm.config.num_classes != num_classes {
            return Err(Error::ConfigMismatch(format!(
                "warm-start checkpoint has {} classes, dataset has {num_classes}",
                warm.config.num_classes
            )));
        }
        if warm.config.input_size != model.input_size {
            return Err(Error::ConfigMismatch(format!(
                "warm-start checkpoint input {:?} does not match requested {:?}",
                warm.config.input_size, model.input_size
            )));
        }
        // transfer the feature stack and fc6; fcA/fcB stay freshly drawn
        for (name, tensor) in warm.params.iter() {
            let layer = name.rsplit_once('.').map(|(l, _)| l).unwrap_or(name);
            let transferable = layer == "fc6"
                || matches!(
                    model.layer(layer).map(|l| &l.kind),
                    Some(LayerKind::Conv { .. })
                );
            if transferable {
                params.insert(name.clone(), tensor.clone());
            }
        }
    }

    let config = TrainerConfig {
        batch_size: args.batch,
        base_lr: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        dropout_rate: args.dropout,
        lr_drop_factor: args.lr_drop_factor,
        plateau_patience: args.patience,
        max_epochs: args.epochs,
        phase_mode: if args.two_phase {
            PhaseMode::TwoPhase
        } else {
            PhaseMode::Full
        },
        seed: args.seed,
        crop_train: args.crop_train,
        canonical: args.canonical,
    };
    let outcome = train(model, params, &dataset, &config)?;

    save_checkpoint(&args.out, &outcome.best)?;
    let history_path = args
        .out
        .parent()
        .map(|d| d.join("history.csv"))
        .unwrap_or_else(|| PathBuf::from("history.csv"));
    fsutil::atomic_write(&history_path, history_to_csv(&outcome.history).as_bytes())?;

    if let Some(epoch) = outcome.phase_switch_epoch {
        println!("phase switch after epoch {epoch}");
    }
    println!(
        "best validation loss {:.6} at epoch {}",
        outcome.best_val_loss, outcome.best.epoch
    );
    println!("wrote {}", args.out.display());
    println!("wrote {}", history_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let dataset = load_dataset(&args.data)?;
    let split = Split::parse(&args.split)?;
    let crop_mode = CropMode::parse(&args.crop)?;
    let (report, curves) = evaluate(&ckpt, &dataset, split, crop_mode)?;

    let fmt = |v: Option<f64>| match v {
        Some(v) => format!("{v:.4}"),
        None => "n/a".to_string(),
    };
    println!(
        "overall: micro mAP {} | macro mAP {} | micro ROC-AUC {} | macro ROC-AUC {}",
        fmt(report.overall.micro_map),
        fmt(report.overall.macro_map),
        fmt(report.overall.micro_roc_auc),
        fmt(report.overall.macro_roc_auc)
    );
    for group in &report.groups {
        println!(
            "{}: micro mAP {} | macro mAP {} | micro ROC-AUC {} | macro ROC-AUC {}",
            group.group.as_str(),
            fmt(group.aggregate.micro_map),
            fmt(group.aggregate.macro_map),
            fmt(group.aggregate.micro_roc_auc),
            fmt(group.aggregate.macro_roc_auc)
        );
    }
    if report.bbox_fallbacks > 0 {
        eprintln!(
            "warning: {} records had no bbox and used the whole image",
            report.bbox_fallbacks
        );
    }

    if let Some(path) = &args.report {
        let json = serde_json::to_vec_pretty(&report)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
        fsutil::atomic_write(path, &json)?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = &args.curves {
        fsutil::atomic_write(path, curves.to_csv().as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Resize to the checkpoint's canonical size, centre-crop to the model
/// input, and return both the u8 view and the mean-subtracted tensor.
fn model_view(ckpt: &Checkpoint, image: &ImageBuf) -> Result<(ImageBuf, Tensor<f32>)> {
    let crop = ckpt.config.input_size.1 as u32;
    let canonical = ckpt.canonical_size.max(crop);
    let resized = image.resize_bilinear(canonical, canonical)?;
    let off = (canonical - crop) / 2;
    let view = resized.crop(off, off, off + crop, off + crop)?;
    let tensor = preprocess(image, canonical, ckpt.mean_rgb)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cropped = augment(&tensor, crop, AugmentMode::Eval, &mut rng)?;
    Ok((view, cropped))
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let image = ImageBuf::load(&args.image)?;
    let (_, tensor) = model_view(&ckpt, &image)?;
    let (c, h, w) = ckpt.config.input_size;
    let batch = Tensor::new(vec![1, c, h, w], tensor.data().to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (scores, _) = crate::model::forward(&ckpt.config, &ckpt.params, batch, false, &mut rng)?;

    let names = ckpt.schema.class_names();
    let mut ranked: Vec<(usize, f32)> = scores.data().iter().cloned().enumerate().collect();
    // stable sort keeps class order on ties
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for (idx, score) in ranked.into_iter().take(args.top.min(names.len())) {
        println!("{} {:.4}", names[idx], score);
    }
    Ok(())
}

fn cmd_attend(args: AttendArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let names = ckpt.schema.class_names();
    let class_index = names
        .iter()
        .position(|n| n == &args.class_name)
        .ok_or_else(|| Error::UnknownClass {
            name: args.class_name.clone(),
            valid: names.join(", "),
        })?;

    let layer = match &args.layer {
        Some(name) => name.clone(),
        None => ckpt
            .config
            .layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .map(|l| l.name.clone())
            .unwrap_or_else(|| INPUT_LAYER.to_string()),
    };

    let image = ImageBuf::load(&args.image)?;
    let (view, tensor) = model_view(&ckpt, &image)?;
    let map = excitation_map(&ckpt, &tensor, class_index, &layer)?;
    let files = export_heatmap(&map, &view, &args.out)?;

    let meta = AttentionMeta {
        class: args.class_name.clone(),
        class_index,
        layer: map.layer.clone(),
        lost_mass_fraction: map.lost_mass,
        total_mass: map.total_mass(),
        max_location: {
            let (x, y) = map.max_location();
            [x, y]
        },
    };
    let meta_path = args.out.with_extension("json");
    let json = serde_json::to_vec_pretty(&meta)
        .map_err(|e| Error::Config(format!("metadata serialization: {e}")))?;
    fsutil::atomic_write(&meta_path, &json)?;

    println!("wrote {}", files.overlay.display());
    println!("wrote {}", files.grayscale.display());
    println!("wrote {}", meta_path.display());
    println!(
        "class {} | layer {} | lost mass {:.6} | max at ({}, {})",
        args.class_name,
        map.layer,
        map.lost_mass,
        meta.max_location[0],
        meta.max_location[1]
    );
    Ok(())
}
