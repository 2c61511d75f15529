use std::fs;
use std::path::{Path, PathBuf};

use agrp::checkpoint::{load_checkpoint, save_checkpoint};
use agrp::data::{read_dataset, write_dataset, LabeledImage, NoisyDataset, SyntheticSpec, Truth};
use agrp::eval::{accuracy, attention_heatmap, encode_pgm, localization, predict, rerank};
use agrp::losses::argmax;
use agrp::gradsuite::{run_grad_suite, SuiteOptions, TOLERANCE};
use agrp::model::ModelState;
use agrp::trainer::{train, TrainHistory};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{DataSource, ExperimentConfig, IdxSource};
use crate::error::{CliError, CliResult};
use crate::sweep::{run_sweep, thread_cap, SWEEP_CSV};

pub const CHECKPOINT_FILE: &str = "model.agrp";
pub const HISTORY_CSV: &str = "history.csv";
pub const DATA_DIR: &str = "data";

#[derive(Debug, Parser)]
#[command(name = "agrp", version, about = "Group-trained attention pooling on noisy labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a noisy dataset directory.
    GenData(GenDataArgs),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Classification accuracy on the test split.
    Eval(EvalArgs),
    /// Rank training images per class and score the ranking.
    Rerank(RerankArgs),
    /// Write attention heatmaps as PGM images.
    Attmap(AttmapArgs),
    /// Run the group size × noise level × seed grid.
    Sweep(SweepArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    pub noise_level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long)]
    pub image_side: Option<usize>,
    /// Use clean IDX images instead of generating them.
    #[arg(long, requires_all = ["idx_labels", "distractor_images", "distractor_labels"])]
    pub idx_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    pub idx_labels: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    pub distractor_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    pub distractor_labels: Option<PathBuf>,
    #[arg(long, requires_all = ["idx_images", "test_labels"])]
    pub test_images: Option<PathBuf>,
    #[arg(long, requires = "test_images")]
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Overrides the config's output_dir.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Per-image predictions CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Ranking CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-class average precision CSV; defaults to `<out>` with a
    /// `_summary` suffix.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct AttmapArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory for the PGM files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Only the first N images of the split.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 24)]
    pub probes: usize,
    /// Scale analytic gradients by 1 + 1e-3; the check must then fail.
    #[arg(long)]
    pub perturb: bool,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a),
        Command::Rerank(a) => cmd_rerank(&a),
        Command::Attmap(a) => cmd_attmap(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> CliResult<()> {
    let ds = match &a.idx_images {
        Some(images) => {
            let src = IdxSource {
                images: images.clone(),
                labels: a.idx_labels.clone().unwrap_or_default(),
                distractor_images: a.distractor_images.clone().unwrap_or_default(),
                distractor_labels: a.distractor_labels.clone().unwrap_or_default(),
                test_images: a.test_images.clone(),
                test_labels: a.test_labels.clone(),
                noise_level: a.noise_level,
                seed: a.seed,
            };
            src.load(a.noise_level, a.seed)?
        }
        None => {
            let side = a.image_side.unwrap_or(SyntheticSpec::default().image_side);
            let spec = SyntheticSpec::new(a.classes, a.per_class, side, a.noise_level, a.seed);
            DataSource::Synthetic(spec).load()?
        }
    };
    let m = write_dataset(&a.out, &ds)?;
    println!(
        "train={} negatives={} test={} cross_category={} cross_domain={}",
        m.train.len(),
        m.negatives.len(),
        m.test.len(),
        m.noise_split.cross_category,
        m.noise_split.cross_domain
    );
    Ok(())
}

fn write_history(path: &Path, history: &TrainHistory) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "l_class", "r_term", "total", "lr"])?;
    for e in &history.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.l_class.to_string(),
            e.r_term.to_string(),
            e.total.to_string(),
            e.lr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains per the config and writes the checkpoint, loss history, resolved
/// config and (for generated sources) the dataset into the output
/// directory. Returns that directory.
pub fn cmd_train(a: &TrainArgs) -> CliResult<PathBuf> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(dir) = &a.output_dir {
        cfg.output_dir = dir.clone();
    }
    let ds = cfg.dataset.load()?;
    let (model, history) = train(&cfg.resolved_train(), &ds)?;

    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &model)?;
    write_history(&dir.join(HISTORY_CSV), &history)?;
    cfg.write_resolved(&dir)?;
    if !matches!(cfg.dataset, DataSource::Directory(_)) {
        write_dataset(dir.join(DATA_DIR), &ds)?;
    }
    if let Some(last) = history.epochs.last() {
        println!("l_class={} r_term={}", last.l_class, last.r_term);
    }
    println!("checkpoint={}", ckpt.display());
    Ok(dir)
}

/// Loads a checkpoint and a dataset directory and checks they fit
/// together.
pub fn load_pair(a: &ModelArgs) -> CliResult<(ModelState, NoisyDataset)> {
    let model = load_checkpoint(&a.checkpoint).map_err(|e| CliError::from(e).at(&a.checkpoint))?;
    let ds = read_dataset(&a.data).map_err(|e| CliError::from(e).at(&a.data))?;
    let (side, channels) = ds.image_dims()?;
    if side != model.extractor.input_side || channels != model.extractor.input_channels {
        return Err(CliError::mismatch(format!(
            "checkpoint expects {0}×{0}×{1} images, dataset has {2}×{2}×{3}",
            model.extractor.input_side, model.extractor.input_channels, side, channels
        )));
    }
    if ds.class_count != model.class_count {
        return Err(CliError::mismatch(format!(
            "checkpoint has {} classes, dataset has {}",
            model.class_count, ds.class_count
        )));
    }
    Ok((model, ds))
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let (model, ds) = load_pair(&a.model)?;
    if ds.test.is_empty() {
        return Err(CliError::config("dataset has no test split"));
    }
    let acc = accuracy(&model, &ds.test)?;
    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_path(out)?;
        w.write_record(["image_id", "true_label", "predicted", "correct"])?;
        for img in &ds.test {
            let truth = img.true_label.unwrap_or(img.given_label);
            let pred = argmax(&predict(&model, &img.pixels)?);
            w.write_record([
                img.id.to_string(),
                truth.to_string(),
                pred.to_string(),
                (pred == truth).to_string(),
            ])?;
        }
        w.flush()?;
    }
    println!("accuracy={acc}");
    Ok(())
}

fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("ranking");
    out.with_file_name(format!("{stem}_summary.csv"))
}

pub fn cmd_rerank(a: &RerankArgs) -> CliResult<()> {
    let (model, ds) = load_pair(&a.model)?;
    let res = rerank(&model, &ds.train)?;

    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["class", "rank", "image_id", "score", "truth"])?;
    for c in &res.classes {
        for (rank, r) in c.ranked.iter().enumerate() {
            w.write_record([
                c.class.to_string(),
                (rank + 1).to_string(),
                r.id.to_string(),
                r.score.to_string(),
                r.truth.as_str().to_owned(),
            ])?;
        }
    }
    w.flush()?;

    let summary = a.summary.clone().unwrap_or_else(|| summary_path(&a.out));
    let mut w = csv::Writer::from_path(&summary)?;
    w.write_record(["class", "average_precision"])?;
    for c in &res.classes {
        let ap = c.average_precision.map_or_else(String::new, |v| v.to_string());
        w.write_record([c.class.to_string(), ap])?;
    }
    w.write_record(["map".to_owned(), res.mean_average_precision.to_string()])?;
    w.flush()?;

    if res.skipped_classes > 0 {
        eprintln!("{} classes without a correct image were left out of the mean", res.skipped_classes);
    }
    println!("map={}", res.mean_average_precision);
    Ok(())
}

pub fn cmd_attmap(a: &AttmapArgs) -> CliResult<()> {
    let (model, ds) = load_pair(&a.model)?;
    let split = match a.split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    };
    let images: Vec<&LabeledImage> = split.iter().take(a.limit.unwrap_or(usize::MAX)).collect();
    fs::create_dir_all(&a.out)?;
    for img in &images {
        let h = attention_heatmap(&model, &img.pixels)?;
        fs::write(a.out.join(format!("{}.pgm", img.id)), encode_pgm(h.side, &h.quantized())?)?;
    }
    println!("heatmaps={}", images.len());
    let boxed: Vec<LabeledImage> = images
        .iter()
        .filter(|i| i.truth == Truth::Correct && i.signature_box.is_some())
        .map(|&i| i.clone())
        .collect();
    if !boxed.is_empty() {
        let loc = localization(&model, &boxed)?;
        println!("localization={}", loc.ratio());
    }
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(dir) = &a.output_dir {
        cfg.output_dir = dir.clone();
    }
    let threads = thread_cap()?;
    fs::create_dir_all(&cfg.output_dir)?;
    cfg.write_resolved(&cfg.output_dir)?;
    let csv_path = cfg.output_dir.join(SWEEP_CSV);
    let report = run_sweep(&cfg, &csv_path, threads)?;
    for (cell, e) in &report.failures {
        eprintln!("cell {cell} failed: {e}");
    }
    println!(
        "cells={} resumed={} completed={} failed={}",
        report.total,
        report.resumed,
        report.completed,
        report.failures.len()
    );
    match report.failures.iter().map(|(_, e)| e.code).max() {
        None => Ok(()),
        Some(code) => Err(CliError {
            code,
            message: format!("{} sweep cells failed", report.failures.len()),
        }),
    }
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let res = run_grad_suite(SuiteOptions {
        seeds: a.seeds,
        probes: a.probes,
        perturb: a.perturb,
        ..SuiteOptions::default()
    })?;
    for r in &res {
        println!(
            "{:<18} worst_rel_error={:.3e} probes={} skipped={} {}",
            r.name,
            r.worst,
            r.probes,
            r.skipped,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = res.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::numeric(format!(
            "{failed} components exceed relative error {TOLERANCE:e}"
        )));
    }
    Ok(())
}
