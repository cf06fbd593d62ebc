//! The `cfa` command line.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cascade::CascadeModel;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CfaError, Result};
use crate::heatmap::FusionMode;
use crate::metrics::{pckh, report_json, report_table, PckhReport};
use crate::schema::{
    load_annotations, load_predictions, save_annotations, save_predictions, write_json, PoseSample,
    PredictionRecord, SkeletonSpec,
};
use crate::synth::{generate_dataset_with, num_workers, read_ppm, write_ppm, Canvas};
use crate::trainer::{evaluate, predict_records, train_with, Evaluation, LogEntry};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const CONFIG_ECHO_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "cfa", version, about = "Cascade feature aggregation pose estimation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a single configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded data generation; results are reproducible either way.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    stages: Option<usize>,
    #[arg(long, global = true)]
    fusion_window: Option<usize>,
    #[arg(long, global = true, value_parser = ["eq5", "mean"])]
    fusion_mode: Option<String>,
    #[arg(long, global = true, overrides_with = "no_flip_test")]
    flip_test: bool,
    #[arg(long, global = true, overrides_with = "flip_test")]
    no_flip_test: bool,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset (PPM images plus annotations).
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train a fresh cascade.
    Train {
        /// Dataset directory; a synthetic set is generated in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Append a stage to a trained cascade and continue training.
    Grow {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-stage and fused PCKh table.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score an existing prediction file instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Write skeleton overlays and a per-stage accuracy chart.
        #[arg(long)]
        plots: bool,
        #[arg(long, default_value_t = 4)]
        plot_samples: usize,
    },
    /// Write fused predictions for a dataset.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for item in &global.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CfaError::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if global.deterministic {
        cfg.deterministic = true;
    }
    if let Some(m) = global.stages {
        cfg.model.stages = m;
    }
    if let Some(n) = global.fusion_window {
        cfg.model.fusion_window = Some(n);
        cfg.eval.fusion_window = Some(n);
    }
    if let Some(mode) = &global.fusion_mode {
        let mode: FusionMode = mode.parse()?;
        cfg.model.fusion_mode = mode;
        cfg.eval.fusion_mode = Some(mode);
    }
    if global.flip_test {
        cfg.eval.use_flip_test = true;
    }
    if global.no_flip_test {
        cfg.eval.use_flip_test = false;
    }
    if let Some(out) = &global.out {
        cfg.paths.out = out.clone();
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CfaError::io(dir, e))
}

fn image_rel_path(id: &str) -> String {
    format!("images/{id}.ppm")
}

/// Reads `annotations.json` and the referenced PPM images from `dir`.
pub fn load_dataset(dir: &Path) -> Result<Vec<PoseSample>> {
    let anns = load_annotations(dir.join(ANNOTATIONS_FILE))?;
    anns.into_iter()
        .map(|annotation| {
            let rel = annotation
                .image_path
                .clone()
                .unwrap_or_else(|| image_rel_path(&annotation.image_id));
            Ok(PoseSample {
                image: read_ppm(dir.join(rel))?,
                annotation,
            })
        })
        .collect()
}

fn dataset_for(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<Vec<PoseSample>> {
    match data {
        Some(dir) => load_dataset(dir),
        None => synthesize(cfg),
    }
}

fn synthesize(cfg: &RunConfig) -> Result<Vec<PoseSample>> {
    let workers = if cfg.deterministic { 1 } else { num_workers() };
    generate_dataset_with(&cfg.synth_config(), workers)
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    let text = cfg.to_text();
    for line in text.lines() {
        log::info!("config: {line}");
    }
    create_dir(&cfg.paths.out)?;
    let path = cfg.paths.out.join(CONFIG_ECHO_FILE);
    fs::write(&path, text).map_err(|e| CfaError::io(&path, e))
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.global)?;
    match cli.command {
        Command::Synth { count, image_size } => {
            if let Some(c) = count {
                cfg.synth.count = c;
            }
            if let Some(s) = image_size {
                cfg.synth.image_size = s;
            }
            if cli.global.out.is_none() {
                cfg.paths.out = cfg.paths.data.clone();
            }
            cfg.synth_config().validate()?;
            synth(&cfg)
        }
        Command::Train { data } => {
            cfg.validate()?;
            echo_config(&cfg)?;
            let dataset = dataset_for(&cfg, &data)?;
            let model = CascadeModel::new(cfg.cascade_config()?)?;
            let hash = fit(&cfg, model, &dataset, None)?;
            println!("checkpoint {} sha256 {hash}", cfg.paths.out.join(CHECKPOINT_FILE).display());
            Ok(())
        }
        Command::Grow { checkpoint: ckpt, data } => {
            cfg.validate()?;
            echo_config(&cfg)?;
            let parent = checkpoint::file_hash(&ckpt)?;
            let (model, _) = checkpoint::load(&ckpt)?;
            let mut grown = model.grow(&cfg.growth_stage())?;
            if let Some(n) = cli.global.fusion_window {
                grown.set_fusion(n, grown.config().fusion_mode)?;
            }
            let dataset = dataset_for(&cfg, &data)?;
            let hash = fit(&cfg, grown, &dataset, Some(parent))?;
            println!("checkpoint {} sha256 {hash}", cfg.paths.out.join(CHECKPOINT_FILE).display());
            Ok(())
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            predictions,
            plots,
            plot_samples,
        } => {
            cfg.validate()?;
            let data_dir = data.unwrap_or_else(|| cfg.paths.data.clone());
            match (ckpt, predictions) {
                (_, Some(preds)) => score_predictions(&cfg, &data_dir, &preds),
                (Some(ckpt), None) => eval_model(&cfg, &ckpt, &data_dir, plots.then_some(plot_samples)),
                (None, None) => Err(CfaError::Config("eval needs --checkpoint or --predictions".into())),
            }
        }
        Command::Predict { checkpoint: ckpt, data } => {
            cfg.validate()?;
            let data_dir = data.unwrap_or_else(|| cfg.paths.data.clone());
            let (model, _) = checkpoint::load(&ckpt)?;
            let dataset = load_dataset(&data_dir)?;
            let records = predict_records(&model, &dataset, &cfg.eval, &SkeletonSpec::mpii())?;
            create_dir(&cfg.paths.out)?;
            let path = cfg.paths.out.join("predictions.json");
            save_predictions(&records, &path)?;
            println!("wrote {} predictions to {}", records.len(), path.display());
            Ok(())
        }
    }
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.paths.out;
    create_dir(&dir.join("images"))?;
    let samples = synthesize(cfg)?;
    let mut anns = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = image_rel_path(&s.annotation.image_id);
        write_ppm(&s.image, dir.join(&rel))?;
        let mut ann = s.annotation;
        ann.image_path = Some(rel);
        anns.push(ann);
    }
    save_annotations(&anns, dir.join(ANNOTATIONS_FILE))?;
    println!("wrote {} samples to {}", anns.len(), dir.display());
    Ok(())
}

/// Trains, checkpointing after every epoch; returns the final file hash.
fn fit(cfg: &RunConfig, mut model: CascadeModel, dataset: &[PoseSample], parent: Option<String>) -> Result<String> {
    let out = &cfg.paths.out;
    create_dir(out)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CfaError::io(&log_path, e))?;
    let mut hash = checkpoint::save(&model, &ckpt_path, parent.clone())?;
    let train_cfg = cfg.train_config();
    train_with(&mut model, dataset, &train_cfg, |m, summary, entries: &[LogEntry]| {
        for e in entries {
            writeln!(log_file, "{}", e.line()).map_err(|err| CfaError::io(&log_path, err))?;
        }
        hash = checkpoint::save(m, &ckpt_path, parent.clone())?;
        log::info!("epoch {} checkpoint sha256 {hash}", summary.epoch);
        Ok(())
    })?;
    Ok(hash)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CfaError::io(path, e))
}

fn emit_reports(cfg: &RunConfig, rows: &[(String, PckhReport)]) -> Result<()> {
    let table = report_table(rows);
    print!("{table}");
    create_dir(&cfg.paths.out)?;
    write_text(&cfg.paths.out.join("report.txt"), &table)?;
    write_json(&report_json(rows), &cfg.paths.out.join("report.json"))
}

fn score_predictions(cfg: &RunConfig, data_dir: &Path, preds: &Path) -> Result<()> {
    let anns = load_annotations(data_dir.join(ANNOTATIONS_FILE))?;
    let records = load_predictions(preds)?;
    let report = pckh(&records, &anns, &SkeletonSpec::mpii(), cfg.eval.alpha)?;
    emit_reports(cfg, &[("predictions".to_string(), report)])
}

fn eval_model(cfg: &RunConfig, ckpt: &Path, data_dir: &Path, plots: Option<usize>) -> Result<()> {
    let (model, _) = checkpoint::load(ckpt)?;
    let dataset = load_dataset(data_dir)?;
    let skel = SkeletonSpec::mpii();
    let evaluation = evaluate(&model, &dataset, &cfg.eval, &skel)?;
    emit_reports(cfg, &evaluation.rows())?;
    save_predictions(&evaluation.predictions, cfg.paths.out.join("predictions.json"))?;
    if let Some(k) = plots {
        write_plots(&cfg.paths.out.join("plots"), &dataset, &evaluation, k, &skel)?;
    }
    Ok(())
}

fn write_plots(
    dir: &Path,
    dataset: &[PoseSample],
    evaluation: &Evaluation,
    samples: usize,
    skel: &SkeletonSpec,
) -> Result<()> {
    create_dir(dir)?;
    for (sample, pred) in dataset.iter().zip(&evaluation.predictions).take(samples) {
        let overlay = overlay(sample, pred, skel)?;
        write_ppm(&overlay, dir.join(format!("overlay_{}.ppm", sample.annotation.image_id)))?;
    }
    write_ppm(&accuracy_chart(&evaluation.rows()), dir.join("pckh_by_stage.ppm"))
}

/// Ground truth in green, prediction in red.
fn overlay(sample: &PoseSample, pred: &PredictionRecord, skel: &SkeletonSpec) -> Result<crate::tensor::Tensor> {
    let mut canvas = Canvas::from_tensor(&sample.image)?;
    let ann = &sample.annotation;
    for &(a, b) in skel.limbs() {
        if ann.visibility[a] && ann.visibility[b] {
            canvas.line(ann.keypoints[a], ann.keypoints[b], 1.0, [0.1, 0.9, 0.2], 0.8);
        }
        canvas.line(pred.keypoints[a], pred.keypoints[b], 1.0, [0.95, 0.1, 0.1], 0.9);
    }
    for kp in &pred.keypoints {
        canvas.disc(*kp, 1.2, [1.0, 1.0, 0.0], 1.0);
    }
    Ok(canvas.into_tensor())
}

/// Bar chart of total PCKh per row (stages, then fused in orange).
fn accuracy_chart(rows: &[(String, PckhReport)]) -> crate::tensor::Tensor {
    let (bar, gap, height) = (24.0, 12.0, 120.0);
    let width = (gap + rows.len() as f64 * (bar + gap)).ceil() as usize;
    let mut canvas = Canvas::new(width, height as usize, [1.0, 1.0, 1.0]);
    for level in [0.25, 0.5, 0.75, 1.0] {
        let y = height - 10.0 - level * (height - 20.0);
        canvas.line([0.0, y], [width as f64, y], 1.0, [0.85, 0.85, 0.85], 1.0);
    }
    for (i, (label, report)) in rows.iter().enumerate() {
        let h = report.total() * (height - 20.0);
        let x = gap + i as f64 * (bar + gap);
        let color = if label == "fused" { [0.95, 0.55, 0.1] } else { [0.2, 0.4, 0.85] };
        canvas.rect(x, height - 10.0 - h, bar, h, color, 1.0);
    }
    canvas.into_tensor()
}
