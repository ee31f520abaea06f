//! `egopath`: annotate, split, synthesize, train, evaluate, infer and benchmark.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! for failures while running.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use candle_core::Device;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use egopath_core::augmentation::AugmentationConfig;
use egopath_core::config::{CropMode, Needs, RunConfig};
use egopath_core::dataset::{
    auto_select_ego_pair, load_annotations, load_labeled_images, load_rail_pairs, save_annotations, split_dataset, DatasetSplit,
    EgoPathAnnotation, LabeledImage, IMAGE_EXTENSIONS,
};
use egopath_core::geometry::CropRegion;
use egopath_core::inference::{adaptive_crop_update, benchmark_latency, predict, render_overlay, CropState, EgoPathPrediction};
use egopath_core::model::{BackboneId, Model, Paradigm};
use egopath_core::synth::{generate_set, write_set};
use egopath_core::training::{train, validate, CHECKPOINT_FILE};
use egopath_core::Error;

#[derive(Debug, Parser)]
#[command(name = "egopath", version, about = "Train ego-path detection")]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed of the command's randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More logging (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Subset {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CropModeArg {
    Fixed,
    Adaptive,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Picks the ego rail pair of each image from its candidate pairs.
    Annotate {
        #[arg(long)]
        rails: Option<PathBuf>,
    },
    /// Splits the annotated images into train/val/test lists.
    Split {
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Renders a synthetic dataset.
    Synth {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Trains a model.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        paradigm: Option<Paradigm>,
        #[arg(long)]
        backbone: Option<BackboneId>,
    },
    /// Reports IoU and loss of a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        subset: Subset,
    },
    /// Predicts ego-paths for an image or a directory of frames.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        crop_mode: Option<CropModeArg>,
        /// Also write overlay images.
        #[arg(long)]
        overlays: bool,
    },
    /// Times forward passes of a checkpoint.
    Benchmark {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::UnsupportedBackbone(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn device(name: &str) -> Outcome<Device> {
    match name {
        "cpu" => Ok(Device::Cpu),
        other => Err(usage(format!("device {other:?} is not available in this build (only \"cpu\")"))),
    }
}

fn load_config(cli: &Cli) -> Outcome<RunConfig> {
    match &cli.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    let dev = device(&cli.device)?;
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Annotate { rails } => {
            if let Some(r) = rails {
                cfg.dataset.rails = Some(r.clone());
            }
            cfg.validate(&[Needs::Rails])?;
            cmd_annotate(cli, &cfg)
        }
        Command::Split { annotations } => {
            if let Some(a) = annotations {
                cfg.dataset.annotations = Some(a.clone());
            }
            if let Some(s) = cli.seed {
                cfg.split.seed = s;
            }
            cfg.validate(&[Needs::Annotations])?;
            cmd_split(cli, &cfg)
        }
        Command::Synth { count } => {
            if let Some(c) = count {
                cfg.synth.count = *c;
            }
            if let Some(s) = cli.seed {
                cfg.synth.seed = s;
            }
            cfg.validate(&[])?;
            cmd_synth(cli, &cfg)
        }
        Command::Train { epochs, paradigm, backbone } => {
            if let Some(e) = epochs {
                cfg.train.epochs = Some(*e);
            }
            if let Some(p) = paradigm {
                if *p != cfg.train.paradigm {
                    cfg.train.head = None;
                }
                cfg.train.paradigm = *p;
            }
            if let Some(b) = backbone {
                cfg.train.backbone = *b;
            }
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            cfg.validate(&[Needs::Images, Needs::Annotations, Needs::Split])?;
            cmd_train(cli, &cfg, &dev)
        }
        Command::Eval { checkpoint, subset } => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            cfg.validate(&[Needs::Images, Needs::Annotations, Needs::Split])?;
            cmd_eval(cli, &cfg, &dev, checkpoint, *subset)
        }
        Command::Infer { checkpoint, input, crop_mode, overlays } => {
            if let Some(m) = crop_mode {
                cfg.inference.crop_mode = match m {
                    CropModeArg::Fixed => CropMode::Fixed,
                    CropModeArg::Adaptive => CropMode::Adaptive,
                };
            }
            cfg.inference.overlays |= *overlays;
            cfg.validate(&[])?;
            cmd_infer(cli, &cfg, &dev, checkpoint, input)
        }
        Command::Benchmark { checkpoint, iterations, warmup } => {
            if let Some(i) = iterations {
                cfg.inference.benchmark_iterations = *i;
            }
            if let Some(w) = warmup {
                cfg.inference.benchmark_warmup = *w;
            }
            cfg.validate(&[])?;
            cmd_benchmark(cli, &cfg, &dev, checkpoint)
        }
    }
}

#[derive(Serialize)]
struct AmbiguityEntry {
    image_id: String,
    selected: usize,
    margin_px: f64,
    candidates: usize,
}

fn cmd_annotate(cli: &Cli, cfg: &RunConfig) -> Outcome {
    let rails_path = cfg.dataset.rails.as_ref().expect("validated");
    let records = load_rail_pairs(rails_path)?;
    let out = out_path(cli, "annotated");
    fs::create_dir_all(&out)?;
    let mut annotations = Vec::new();
    let mut ambiguous = Vec::new();
    let mut skipped = Vec::new();
    for (id, rec) in &records {
        let pairs = rec.polylines()?;
        let dims = (rec.image_width, rec.image_height);
        let Some(sel) = auto_select_ego_pair(&pairs, dims) else {
            skipped.push(id.clone());
            continue;
        };
        let (l, r) = pairs[sel.index].clone();
        match EgoPathAnnotation::new(id.clone(), l, r, dims) {
            Ok(a) => annotations.push(a),
            Err(e) => {
                log::warn!("{id}: {e}");
                skipped.push(id.clone());
                continue;
            }
        }
        if sel.ambiguous {
            ambiguous.push(AmbiguityEntry { image_id: id.clone(), selected: sel.index, margin_px: sel.margin, candidates: pairs.len() });
        }
    }
    save_annotations(out.join("annotations.json"), &annotations)?;
    write_json(&out.join("ambiguity.json"), &ambiguous)?;
    println!(
        "annotated {} of {} images ({} flagged for review, {} without a usable pair) -> {}",
        annotations.len(),
        records.len(),
        ambiguous.len(),
        skipped.len(),
        out.display()
    );
    Ok(())
}

fn cmd_split(cli: &Cli, cfg: &RunConfig) -> Outcome {
    let loaded = load_annotations(cfg.dataset.annotations.as_ref().expect("validated"), cfg.dataset.default_dims)?;
    for (id, reason) in &loaded.rejected {
        log::warn!("skipping {id}: {reason}");
    }
    let ids: Vec<String> = loaded.annotations.keys().cloned().collect();
    let split = split_dataset(&ids, cfg.split.ratios, cfg.split.seed)?;
    let out = out_path(cli, "split.json");
    write_json(&out, &split)?;
    println!("{} train / {} val / {} test -> {}", split.train.len(), split.val.len(), split.test.len(), out.display());
    Ok(())
}

fn cmd_synth(cli: &Cli, cfg: &RunConfig) -> Outcome {
    let scenes = generate_set(cfg.synth.seed, cfg.synth.count, &cfg.synth.scene)?;
    let out = out_path(cli, "synthetic");
    write_set(&out, &scenes)?;
    println!("wrote {} scenes -> {}", scenes.len(), out.display());
    Ok(())
}

struct Data {
    split: DatasetSplit,
    annotations: BTreeMap<String, EgoPathAnnotation>,
    images: PathBuf,
}

impl Data {
    fn load(cfg: &RunConfig) -> Outcome<Self> {
        let d = &cfg.dataset;
        let loaded = load_annotations(d.annotations.as_ref().expect("validated"), d.default_dims)?;
        for (id, reason) in &loaded.rejected {
            log::warn!("skipping {id}: {reason}");
        }
        let split = DatasetSplit::load(d.split.as_ref().expect("validated"))?;
        Ok(Self { split, annotations: loaded.annotations, images: d.images.clone().expect("validated") })
    }

    fn subset(&self, subset: Subset) -> Outcome<Vec<LabeledImage>> {
        let ids = match subset {
            Subset::Train => &self.split.train,
            Subset::Val => &self.split.val,
            Subset::Test => &self.split.test,
        };
        Ok(load_labeled_images(&self.images, &self.annotations, ids)?)
    }
}

fn cmd_train(cli: &Cli, cfg: &RunConfig, dev: &Device) -> Outcome {
    let data = Data::load(cfg)?;
    let train_set = data.subset(Subset::Train)?;
    let val_set = data.subset(Subset::Val)?;
    let out = out_path(cli, "run");
    fs::create_dir_all(&out)?;
    cfg.save(out.join("config.toml"))?;
    log::info!(
        "training {} {} on {} images ({} val), {} epochs",
        cfg.train.paradigm,
        cfg.train.backbone.name(),
        train_set.len(),
        val_set.len(),
        cfg.train.epochs()
    );
    let outcome = train(&cfg.train, &train_set, &val_set, dev, Some(&out))?;
    let h = &outcome.history;
    let sel = h.selected_epoch.unwrap_or(0);
    let rec = &h.epochs[sel.saturating_sub(1)];
    println!(
        "selected epoch {sel}: val loss {:.5}, val IoU {:.4} ({:.0}s) -> {}",
        rec.val_loss,
        rec.val_iou,
        h.wall_clock_seconds,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path, dev: &Device) -> Outcome<(Model, BTreeMap<String, String>)> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let (model, meta) = Model::load(path, dev)?;
    Ok((model, meta.extra))
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    subset: String,
    images: usize,
    loss: f64,
    mean_iou: f64,
    median_iou: f64,
    per_image: Vec<(String, f64)>,
}

fn cmd_eval(cli: &Cli, cfg: &RunConfig, dev: &Device, checkpoint: &Path, subset: Subset) -> Outcome {
    let (model, extra) = load_checkpoint(checkpoint, dev)?;
    let data = Data::load(cfg)?;
    let images = data.subset(subset)?;
    let mut aug: AugmentationConfig = cfg.train.augmentation.clone();
    aug.work_size = model.spec().input_size as u32;
    if let Some(a) = model.spec().head.anchors() {
        aug.anchors = a;
    }
    let mut loss = cfg.train.loss.clone();
    if let Some(w) = extra.get("w_max").and_then(|w| w.parse().ok()) {
        loss.w_max = w;
    }
    let report = validate(&model, &images, &aug, &loss, cfg.train.seed)?;
    let out = out_path(cli, "eval.json");
    let summary = EvalReport {
        checkpoint: checkpoint.display().to_string(),
        subset: format!("{subset:?}").to_lowercase(),
        images: images.len(),
        loss: report.loss,
        mean_iou: report.iou,
        median_iou: report.median_iou(),
        per_image: report.per_image.clone(),
    };
    write_json(&out, &summary)?;
    println!(
        "{} images: mean IoU {:.4}, median IoU {:.4}, loss {:.5} -> {}",
        summary.images,
        summary.mean_iou,
        summary.median_iou,
        summary.loss,
        out.display()
    );
    Ok(())
}

fn frames(input: &Path) -> Outcome<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_owned()]);
    }
    if !input.is_dir() {
        return Err(usage(format!("input {} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str())))
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Serialize)]
struct FramePrediction {
    frame: usize,
    file: String,
    crop: CropRegion,
    prediction: EgoPathPrediction,
    mask_pixels: Option<usize>,
}

fn cmd_infer(cli: &Cli, cfg: &RunConfig, dev: &Device, checkpoint: &Path, input: &Path) -> Outcome {
    let (model, _) = load_checkpoint(checkpoint, dev)?;
    let files = frames(input)?;
    let out = out_path(cli, "predictions");
    fs::create_dir_all(&out)?;
    if cfg.inference.overlays {
        fs::create_dir_all(out.join("overlays"))?;
    }
    let mut state: Option<CropState> = None;
    let mut results = Vec::with_capacity(files.len());
    for (i, file) in files.iter().enumerate() {
        let image = image::open(file).with_context(|| format!("reading {}", file.display()))?.to_rgb8();
        let dims = image.dimensions();
        let crop = match cfg.inference.crop_mode {
            CropMode::Fixed => match cfg.inference.crop {
                Some([l, t, r, b]) => CropRegion::new(l, t, r, b)?,
                None => CropRegion::full(dims.0, dims.1),
            },
            CropMode::Adaptive => {
                let s = state.get_or_insert_with(|| CropState::new(dims, cfg.inference.adaptive.clone()));
                if s.dims != dims {
                    return Err(Failure::Runtime(anyhow!("frame {} is {dims:?}, earlier frames are {:?}", file.display(), s.dims)));
                }
                s.crop
            }
        };
        let prediction = predict(&model, &image, &crop)?;
        if let Some(s) = state.as_mut() {
            *s = adaptive_crop_update(s, &prediction);
        }
        if cfg.inference.overlays {
            let name = file.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
            render_overlay(&image, &prediction).save(out.join("overlays").join(format!("{name}.png"))).context("writing overlay")?;
        }
        let mask_pixels = prediction.mask.as_ref().map(|m| m.count());
        results.push(FramePrediction { frame: i, file: file.display().to_string(), crop, prediction, mask_pixels });
    }
    write_json(&out.join("predictions.json"), &results)?;
    println!("{} frame(s) -> {}", results.len(), out.display());
    Ok(())
}

fn cmd_benchmark(cli: &Cli, cfg: &RunConfig, dev: &Device, checkpoint: &Path) -> Outcome {
    let (model, _) = load_checkpoint(checkpoint, dev)?;
    let report = benchmark_latency(&model, cfg.inference.benchmark_iterations, cfg.inference.benchmark_warmup)?;
    let out = out_path(cli, "latency.json");
    write_json(&out, &report)?;
    println!(
        "{} {} @{}: mean {:.2} ms, std {:.2} ms, p50 {:.2} ms, p90 {:.2} ms, p99 {:.2} ms over {} runs -> {}",
        model.paradigm(),
        model.spec().backbone.id.name(),
        model.spec().input_size,
        report.mean_ms,
        report.std_ms,
        report.p50_ms,
        report.p90_ms,
        report.p99_ms,
        report.iterations,
        out.display()
    );
    Ok(())
}
