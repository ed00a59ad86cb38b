//! `cevit` command-line tool.

mod fetch;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cevit::attention::{grayscale_raster, mask_raster, overlay_raster, pixel_mask, sharpen_mask, write_pgm, RenderOptions, Selector};
use cevit::data::{load_split, LabeledImage, Split};
use cevit::distraction::{run_benchmark, BenchmarkConfig, PairList};
use cevit::knn::{eval_classifier, eval_knn, eval_knn_cevit, AccuracyReport, KnnConfig};
use cevit::model::{Checkpoint, HeadKind, Model};
use cevit::train::{self, ModelKind, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "cevit", version, about = "Vision-transformer similarity models for MNIST")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Directory holding the four MNIST IDX files.
    #[arg(long, global = true, env = "CEVIT_DATA_DIR", default_value = "data/mnist")]
    data_dir: PathBuf,
    /// Every output of the run is written below this directory.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Seed for all randomness.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download (or verify) the MNIST files.
    FetchData {
        /// Only verify or decompress local files; never touch the network.
        #[arg(long)]
        offline: bool,
    },
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Test-set accuracy of one classification method.
    Eval(EvalArgs),
    /// Render the attention mask for one test image (or image pair).
    Explain(ExplainArgs),
    /// Run the mask distraction benchmark.
    Distract(DistractArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Knn,
    Vit,
    CevitKnn,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Knn => "knn",
            Method::Vit => "vit",
            Method::CevitKnn => "cevit-knn",
        }
    }
}

#[derive(Args, Debug)]
struct Checkpoints {
    /// Classifier checkpoint directory.
    #[arg(long, default_value = "artifacts/vit-desk")]
    vit_checkpoint: PathBuf,
    /// Pairwise scorer checkpoint directory.
    #[arg(long, default_value = "artifacts/cevit-desk")]
    cevit_checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(value_enum)]
    method: Method,
    #[command(flatten)]
    checkpoints: Checkpoints,
    /// Neighbours that vote.
    #[arg(long, default_value_t = 15)]
    k: usize,
    /// Euclidean shortlist size before reranking (cevit-knn).
    #[arg(long, default_value_t = 200)]
    shortlist: usize,
    /// Average both channel orders when scoring (cevit-knn).
    #[arg(long)]
    symmetrize: bool,
    /// Cap on shortlisted references per class (cevit-knn).
    #[arg(long)]
    per_class_cap: Option<usize>,
    /// Evaluate the first N test images only.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    /// Test-set index of the query image.
    #[arg(long)]
    query_idx: usize,
    /// Test-set index of the reference image (pairwise model only).
    #[arg(long)]
    reference_idx: Option<usize>,
    #[arg(long, value_enum, default_value = "cevit")]
    model: ModelArg,
    #[command(flatten)]
    checkpoints: Checkpoints,
    /// first, last or average.
    #[arg(long, default_value = "last")]
    selector: String,
    /// Pixels below this (after min-max scaling) are dropped.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Integer upscaling of the written images.
    #[arg(long, default_value_t = 8)]
    scale: u32,
}

#[derive(Args, Debug)]
struct DistractArgs {
    #[command(flatten)]
    checkpoints: Checkpoints,
    /// File of `q,d` lines; defaults to the built-in ten pairs.
    #[arg(long)]
    pairs_file: Option<PathBuf>,
    /// Common mean of the normalised masks.
    #[arg(long, default_value_t = 0.25)]
    mu: f32,
    /// Image pairs drawn per class pair.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    /// Comma-separated layer selectors.
    #[arg(long, default_value = "first,last,average")]
    selectors: String,
    /// Include per-sample intermediates in the JSON report.
    #[arg(long)]
    verbose: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Vit,
    Cevit,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Vit => ModelKind::Vit,
            ModelArg::Cevit => ModelKind::Cevit,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(value_enum)]
    model: ModelArg,
    /// 20-epoch preset with the full learning-rate rule.
    #[arg(long)]
    desk_scale: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f32>,
    /// Pairs sampled per epoch (cevit only).
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    /// Train on the first N training images only.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Evaluate after each epoch on the first N test images only.
    #[arg(long)]
    eval_limit: Option<usize>,
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Echoes the effective configuration to stdout and `<out>/config.json`.
fn echo_config(out: &Path, value: &impl Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    write_json(&out.join("config.json"), value)
}

fn truncate<T>(mut v: Vec<T>, limit: Option<usize>) -> Vec<T> {
    if let Some(n) = limit {
        v.truncate(n);
    }
    v
}

fn train_config(args: &TrainArgs, seed: u64) -> TrainConfig {
    let kind = ModelKind::from(args.model);
    let mut cfg = if args.desk_scale {
        TrainConfig::desk_scale(kind)
    } else {
        TrainConfig::full(kind)
    };
    cfg.seed = seed;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.schedule.base_lr = lr;
    }
    if let Some(p) = args.pairs_per_epoch {
        cfg.pairs_per_epoch = p;
    }
    cfg
}

fn cmd_train(global: &Global, args: &TrainArgs) -> CliResult<()> {
    let cfg = train_config(args, global.seed);
    cfg.validate()?;
    let out = &global.out_dir;
    echo_config(
        out,
        &serde_json::json!({
            "subcommand": "train",
            "data_dir": global.data_dir,
            "out_dir": out,
            "seed": global.seed,
            "train_limit": args.train_limit,
            "eval_limit": args.eval_limit,
            "train_config": cfg,
        }),
    )?;
    let train_set = truncate(load_split(&global.data_dir, Split::Train)?, args.train_limit);
    let eval_set = truncate(load_split(&global.data_dir, Split::Test)?, args.eval_limit);
    let ckpt_dir = out.join("checkpoint");
    let mut log = fs::File::create(out.join("train_log.jsonl"))?;
    let outcome = train::train(&cfg, &train_set, &eval_set, |entry, model| {
        let line = serde_json::to_string(entry)?;
        writeln!(log, "{line}")?;
        log.flush()?;
        eprintln!(
            "epoch {:>3}  loss {:.5}  lr {:.3e}  {} {:.4}  {:.1}s",
            entry.epoch, entry.mean_loss, entry.lr, entry.metric, entry.eval_metric, entry.wall_time_s
        );
        // Keep a usable checkpoint on disk while a long run is in progress.
        Checkpoint::new(model.clone(), cfg.meta(entry.epoch + 1)).save(&ckpt_dir)
    })?;
    outcome.checkpoint.save(&ckpt_dir)?;
    println!("checkpoint: {}", ckpt_dir.display());
    Ok(())
}

fn cmd_fetch(global: &Global, offline: bool) -> CliResult<()> {
    echo_config(
        &global.out_dir,
        &serde_json::json!({
            "subcommand": "fetch-data",
            "data_dir": global.data_dir,
            "out_dir": global.out_dir,
            "seed": global.seed,
            "offline": offline,
        }),
    )?;
    fetch::fetch(&global.data_dir, offline, &mut |msg| eprintln!("{msg}"))?;
    println!("MNIST ready in {}", global.data_dir.display());
    Ok(())
}

fn load_checkpoint(path: &Path, head: HeadKind) -> CliResult<Model> {
    if !path.join(cevit::model::MANIFEST_FILE).exists() {
        return Err(format!(
            "checkpoint not found at {} (train one with `cevit train`)",
            path.display()
        )
        .into());
    }
    let ckpt = Checkpoint::load(path)?;
    if ckpt.config().head != head {
        return Err(format!(
            "{} holds a {:?} model, expected {head:?}",
            path.display(),
            ckpt.config().head
        )
        .into());
    }
    Ok(ckpt.model)
}

fn progress(total: usize) -> impl FnMut(usize) {
    move |done| {
        if done % 500 == 0 || done == total {
            eprintln!("{done}/{total}");
        }
    }
}

fn write_report(out: &Path, report: &AccuracyReport) -> CliResult<()> {
    let stem = format!("eval_{}", report.method);
    fs::write(out.join(format!("{stem}.json")), report.to_json()? + "\n")?;
    fs::write(out.join(format!("{stem}.csv")), report.to_csv())?;
    Ok(())
}

fn cmd_eval(global: &Global, args: &EvalArgs) -> CliResult<()> {
    let knn = KnnConfig {
        k: args.k,
        shortlist: args.shortlist,
        symmetrize: args.symmetrize,
        per_class_cap: args.per_class_cap,
    };
    let out = &global.out_dir;
    echo_config(
        out,
        &serde_json::json!({
            "subcommand": "eval",
            "method": args.method.name(),
            "data_dir": global.data_dir,
            "out_dir": out,
            "seed": global.seed,
            "vit_checkpoint": args.checkpoints.vit_checkpoint,
            "cevit_checkpoint": args.checkpoints.cevit_checkpoint,
            "knn": knn,
            "limit": args.limit,
        }),
    )?;
    let test = truncate(load_split(&global.data_dir, Split::Test)?, args.limit);
    let n = test.len();
    let report = match args.method {
        Method::Knn => {
            let train = load_split(&global.data_dir, Split::Train)?;
            eval_knn(&test, &train, args.k, progress(n))?
        }
        Method::Vit => {
            let model = load_checkpoint(&args.checkpoints.vit_checkpoint, HeadKind::Classifier10)?;
            eval_classifier(&test, &model, progress(n))?
        }
        Method::CevitKnn => {
            let model = load_checkpoint(&args.checkpoints.cevit_checkpoint, HeadKind::Similarity1)?;
            let train = load_split(&global.data_dir, Split::Train)?;
            eval_knn_cevit(&test, &train, &model, &knn, progress(n))?
        }
    };
    write_report(out, &report)?;
    println!(
        "{}: accuracy {:.4} ({}/{}) in {:.1}s",
        report.method, report.accuracy, report.correct, report.total, report.elapsed_s
    );
    Ok(())
}

fn test_image(test: &[LabeledImage], idx: usize, what: &str) -> CliResult<LabeledImage> {
    test.get(idx).cloned().ok_or_else(|| {
        format!("{what} index {idx} is out of range (test set has {} images)", test.len()).into()
    })
}

fn cmd_explain(global: &Global, args: &ExplainArgs) -> CliResult<()> {
    let selector: Selector = args.selector.parse()?;
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(format!("threshold must lie in [0, 1], got {}", args.threshold).into());
    }
    let kind = ModelKind::from(args.model);
    let out = &global.out_dir;
    echo_config(
        out,
        &serde_json::json!({
            "subcommand": "explain",
            "data_dir": global.data_dir,
            "out_dir": out,
            "seed": global.seed,
            "model": kind.as_str(),
            "query_idx": args.query_idx,
            "reference_idx": args.reference_idx,
            "selector": selector,
            "threshold": args.threshold,
            "scale": args.scale,
            "checkpoint": match kind {
                ModelKind::Vit => &args.checkpoints.vit_checkpoint,
                ModelKind::Cevit => &args.checkpoints.cevit_checkpoint,
            },
        }),
    )?;
    let test = load_split(&global.data_dir, Split::Test)?;
    let query = test_image(&test, args.query_idx, "query")?;
    let stem = match kind {
        ModelKind::Vit => format!("explain_q{}_vit_{selector}", args.query_idx),
        ModelKind::Cevit => format!(
            "explain_q{}_r{}_cevit_{selector}",
            args.query_idx,
            args.reference_idx.unwrap_or(0)
        ),
    };
    let mut summary = serde_json::json!({
        "query_idx": args.query_idx,
        "query_label": query.label,
        "selector": selector,
        "threshold": args.threshold,
    });
    let (trace, reference) = match kind {
        ModelKind::Vit => {
            let model = load_checkpoint(&args.checkpoints.vit_checkpoint, HeadKind::Classifier10)?;
            let (logits, trace) = model.vit_forward(&query.pixels)?;
            let probs = cevit::distraction::softmax_probs(&logits);
            summary["predicted_label"] = train::argmax_label(&logits).into();
            summary["probabilities"] = serde_json::to_value(&probs)?;
            (trace, None)
        }
        ModelKind::Cevit => {
            let Some(ri) = args.reference_idx else {
                return Err("--reference-idx is required for the cevit model".into());
            };
            let reference = test_image(&test, ri, "reference")?;
            let model = load_checkpoint(&args.checkpoints.cevit_checkpoint, HeadKind::Similarity1)?;
            let (score, trace) = model.cevit_score(&query.pixels, &reference.pixels)?;
            summary["reference_idx"] = ri.into();
            summary["reference_label"] = reference.label.into();
            summary["similarity"] = score.into();
            (trace, Some(reference))
        }
    };
    let side = cevit::data::IMAGE_SIDE;
    let raw = pixel_mask(&trace, selector, side)?;
    let sharp = sharpen_mask(&raw, args.threshold)?;
    let opts = RenderOptions {
        scale: args.scale,
        ..RenderOptions::default()
    };
    fs::create_dir_all(out)?;
    let path = |suffix: &str| out.join(format!("{stem}_{suffix}"));
    let mut written = Vec::new();
    grayscale_raster(&query.pixels, side, opts.scale)?.save(path("query.png"))?;
    written.push(path("query.png"));
    if let Some(r) = &reference {
        grayscale_raster(&r.pixels, side, opts.scale)?.save(path("reference.png"))?;
        written.push(path("reference.png"));
    }
    for (name, mask) in [("raw_mask", &raw), ("sharp_mask", &sharp)] {
        let img = mask_raster(mask, opts.scale);
        img.save(path(&format!("{name}.png")))?;
        write_pgm(&img, &path(&format!("{name}.pgm")))?;
        written.push(path(&format!("{name}.png")));
        written.push(path(&format!("{name}.pgm")));
    }
    overlay_raster(&query.pixels, &sharp, opts)?.save(path("overlay.png"))?;
    written.push(path("overlay.png"));
    summary["patch_mask"] = serde_json::to_value(cevit::attention::cls_attention(&trace, selector))?;
    summary["files"] = serde_json::to_value(&written)?;
    write_json(&path("summary.json"), &summary)?;
    for f in &written {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_distract(global: &Global, args: &DistractArgs) -> CliResult<()> {
    let pairs = match &args.pairs_file {
        Some(p) => PairList::from_file(p)?,
        None => PairList::default(),
    };
    let selectors = args
        .selectors
        .split(',')
        .map(|s| s.trim().parse::<Selector>())
        .collect::<Result<Vec<_>, _>>()?;
    let config = BenchmarkConfig {
        pairs,
        samples_per_pair: args.samples,
        selectors,
        mu: args.mu,
        seed: global.seed,
    };
    let out = &global.out_dir;
    echo_config(
        out,
        &serde_json::json!({
            "subcommand": "distract",
            "data_dir": global.data_dir,
            "out_dir": out,
            "seed": global.seed,
            "vit_checkpoint": args.checkpoints.vit_checkpoint,
            "cevit_checkpoint": args.checkpoints.cevit_checkpoint,
            "verbose": args.verbose,
            "benchmark": config,
        }),
    )?;
    let vit = load_checkpoint(&args.checkpoints.vit_checkpoint, HeadKind::Classifier10)?;
    let cevit_model = load_checkpoint(&args.checkpoints.cevit_checkpoint, HeadKind::Similarity1)?;
    let test = load_split(&global.data_dir, Split::Test)?;
    let report = run_benchmark(&test, &vit, &cevit_model, &config, |done, total| {
        if done % 50 == 0 || done == total {
            eprintln!("{done}/{total} image pairs");
        }
    })?;
    fs::write(out.join("distraction.csv"), report.to_csv())?;
    fs::write(out.join("distraction.json"), report.to_json(args.verbose)? + "\n")?;
    print!("{}", report.table());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::FetchData { offline } => cmd_fetch(&cli.global, *offline),
        Command::Train(args) => cmd_train(&cli.global, args),
        Command::Eval(args) => cmd_eval(&cli.global, args),
        Command::Explain(args) => cmd_explain(&cli.global, args),
        Command::Distract(args) => cmd_distract(&cli.global, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
