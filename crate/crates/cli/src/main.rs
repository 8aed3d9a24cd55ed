use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dalnet::evaluation::EvalOptions;
use dalnet::network::{checkpoint, Device};
use dalnet::pipeline::{self, viz, InferOptions, SynthConfig, TrainConfig};
use dalnet::synth::{read_dataset, write_dataset, DatasetRecord, Preprocess};

#[derive(Parser)]
#[command(name = "dalnet", version, about = "Dynamic anchor line rail detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (PNG frames + JSON-lines annotations).
    Synth(SynthArgs),
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Detect rails and write a prediction JSON-lines file.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Draw anchors and rails onto copies of the input frames.
    Viz(VizArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Synthesis config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, visible_alias = "first_index")]
    first_index: Option<u64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (`out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, visible_alias = "train_data")]
    train_data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=3))]
    r: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, visible_alias = "max_steps")]
    max_steps: Option<usize>,
    #[arg(long, visible_alias = "batch_size")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, visible_alias = "weight_decay")]
    weight_decay: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, visible_alias = "k_max")]
    k_max: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    augment: Option<bool>,
    /// Any field by dotted path, e.g. `--set loss.slope=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Allow writing into an output directory that already has checkpoints.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prediction file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, visible_alias = "k_max")]
    k_max: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Image files, or annotation files whose `raw_file` entries are used.
    #[arg(required = false)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Frame size the masks are drawn at.
    #[arg(long, default_value_t = 1280)]
    width: usize,
    #[arg(long, default_value_t = 720)]
    height: usize,
    #[arg(long)]
    no_tusimple: bool,
}

#[derive(Args)]
struct VizArgs {
    /// Run this model on the inputs and draw its anchors and rails.
    #[arg(long, conflicts_with = "pred", required_unless_present = "pred")]
    checkpoint: Option<PathBuf>,
    /// Draw the rails of an existing prediction file instead.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, visible_alias = "k_max")]
    k_max: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Image files or annotation files.
    inputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Viz(a) => viz_cmd(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.count {
        cfg.count = n;
    }
    if let Some(s) = a.seed {
        cfg.scene.seed = s;
    }
    if let Some(i) = a.first_index {
        cfg.first_index = i;
    }
    let records = pipeline::cmd_synth(&cfg, &a.out, a.force)?;
    log::info!("wrote {} scenes to {}", records.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = &a.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &a.train_data {
        cfg.train_data = v.clone();
    }
    macro_rules! take {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { cfg.$f = v.into(); } )* };
    }
    take!(seed, epochs, batch_size, lr, weight_decay, sigma, k_max, threshold, augment);
    if let Some(r) = a.r {
        cfg.r = r as usize;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let final_ckpt = cfg.out_dir.join(pipeline::train::FINAL_CHECKPOINT);
    if final_ckpt.exists() && !a.force {
        bail!("{} already exists (use --force to overwrite)", final_ckpt.display());
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("train_config.json"))?;
    let outcome = pipeline::train(&cfg)?;
    log::info!(
        "done after {} steps; final checkpoint {}, best {}",
        outcome.step_losses.len(),
        outcome.final_checkpoint.display(),
        outcome.best_checkpoint.display()
    );
    Ok(())
}

/// Inference settings: flags first, then the checkpoint's training config.
fn infer_options(meta: &serde_json::Value, k_max: Option<usize>, threshold: Option<f64>) -> (InferOptions, Preprocess) {
    let stored: Option<TrainConfig> = meta.get("train_config").and_then(|v| serde_json::from_value(v.clone()).ok());
    let base = stored.unwrap_or_default();
    let opts = InferOptions {
        k_max: k_max.unwrap_or(base.k_max),
        threshold: threshold.unwrap_or(base.threshold),
        ..InferOptions::default()
    };
    (opts, base.preprocess)
}

fn infer(a: InferArgs) -> Result<()> {
    let (model, meta) = checkpoint::load(&a.checkpoint, &Device::Cpu)?;
    let (opts, pre) = infer_options(&meta, a.k_max, a.threshold);
    let inputs = pipeline::resolve_inputs(&a.inputs)?;
    let outcome = pipeline::infer_paths(&model, &pre, &inputs, &opts)?;
    let records: Vec<DatasetRecord> = outcome.predictions.into_iter().map(|p| p.record).collect();
    write_dataset(&a.out, &records)?;
    log::info!("wrote {} predictions to {}", records.len(), a.out.display());
    if !outcome.failures.is_empty() {
        bail!("{} input(s) could not be read, first: {}", outcome.failures.len(), outcome.failures[0].0.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let opts = EvalOptions {
        width: a.width,
        height: a.height,
        tusimple: !a.no_tusimple,
        ..EvalOptions::default()
    };
    let report = pipeline::cmd_eval(&a.pred, &a.gt, &opts)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn viz_cmd(a: VizArgs) -> Result<()> {
    let inputs = pipeline::resolve_inputs(&a.inputs)?;
    let mut frames = Vec::new();
    let mut failures = 0;
    if let Some(ck) = &a.checkpoint {
        let (model, meta) = checkpoint::load(ck, &Device::Cpu)?;
        let (opts, pre) = infer_options(&meta, a.k_max, a.threshold);
        let outcome = pipeline::infer_paths(&model, &pre, &inputs, &opts)?;
        failures = outcome.failures.len();
        let by_name: std::collections::HashMap<&str, &std::path::PathBuf> = inputs.iter().map(|(n, p)| (n.as_str(), p)).collect();
        for p in &outcome.predictions {
            let frame = pipeline::data::load_image(by_name[p.record.raw_file.as_str()])?;
            frames.push((p.record.raw_file.clone(), frame, viz::Overlay::from_prediction(p)));
        }
    } else if let Some(pred) = &a.pred {
        let records = read_dataset(pred)?;
        let by_name: std::collections::HashMap<&str, &DatasetRecord> = records.iter().map(|r| (r.raw_file.as_str(), r)).collect();
        for (name, path) in &inputs {
            let frame = match pipeline::data::load_image(path) {
                Ok(f) => f,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    failures += 1;
                    continue;
                }
            };
            let overlay = by_name.get(name.as_str()).map_or_else(viz::Overlay::default, |r| viz::Overlay::from_record(r));
            frames.push((name.clone(), frame, overlay));
        }
    }
    let written = pipeline::write_overlays(&frames, &a.out)?;
    log::info!("wrote {} overlays to {}", written.len(), a.out.display());
    if failures > 0 {
        log::warn!("{failures} input(s) could not be read");
    }
    Ok(())
}
