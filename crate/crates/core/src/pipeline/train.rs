//! Training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{cosine_lr, num_workers, TrainConfig};
use super::data::{batch_tensor, load_samples, par_map, Sample};
use crate::error::{Error, Result};
use crate::geometry::RailAnnotation;
use crate::label_codec::{CodecConfig, TargetMaps, DEFAULT_STRIDE};
use crate::losses::{total_loss, LossValues};
use crate::network::{checkpoint, DalNet};
use crate::synth::Affine;

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Mean loss terms over the epoch's batches.
    pub loss: LossValues,
    pub total: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: DalNet,
    pub history: Vec<EpochLog>,
    /// Weighted total loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Number of optimizer steps a run will take.
pub fn total_steps(cfg: &TrainConfig, n_samples: usize) -> usize {
    let full = cfg.epochs * n_samples.div_ceil(cfg.batch_size);
    cfg.max_steps.map_or(full, |m| m.min(full))
}

/// Loads `cfg.train_data` and trains on it.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = load_samples(&cfg.train_data, &cfg.preprocess, &cfg.model.grid(), num_workers())?;
    log::info!("loaded {} training images from {}", samples.len(), cfg.train_data.display());
    train_on(cfg, &samples)
}

// Stream ids keep the random sources of a run independent of each other
// and of the worker count.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn step_rng(seed: u64, stream_tag: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_tag << 62 | step as u64);
    rng
}

fn prepare(cfg: &TrainConfig, sample: &Sample, epoch: usize, index: usize) -> (RgbImage, Vec<RailAnnotation>) {
    if !cfg.augment {
        return (sample.image.clone(), sample.rails.clone());
    }
    let grid = cfg.model.grid();
    let mut rng = sample_rng(cfg.seed, epoch, index);
    let aff = Affine::sample(&cfg.augmentation, grid.width_px, grid.height_px, &mut rng);
    (aff.apply_image(&sample.image), aff.apply_rails(&sample.rails, &grid))
}

/// Trains a fresh model on already loaded samples.
///
/// Per step: augment, encode targets, forward with teacher-forced anchors,
/// weighted loss, AdamW update at the cosine-annealed rate. Writes the
/// final checkpoint and the checkpoint of the epoch with the lowest mean
/// loss to `cfg.out_dir`.
pub fn train_on(cfg: &TrainConfig, samples: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let device = Device::Cpu;
    let grid = cfg.model.grid();
    let codec = CodecConfig {
        stride: DEFAULT_STRIDE,
        sigma: cfg.sigma,
        radius: cfg.r,
    };
    let model = DalNet::new(cfg.model.clone(), cfg.seed, DType::F32, &device)?;
    let mut opt = AdamW::new(
        model.params().all_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
    )?;
    let total = total_steps(cfg, samples.len());
    let workers = num_workers();
    log::info!(
        "training {} parameters for {total} steps (batch {}, {workers} data workers)",
        model.params().n_parameters(),
        cfg.batch_size
    );

    let final_path = cfg.out_dir.join(FINAL_CHECKPOINT);
    let best_path = cfg.out_dir.join(BEST_CHECKPOINT);
    let mut log_file = BufWriter::new(File::create(cfg.out_dir.join(TRAIN_LOG))?);
    let mut history = Vec::new();
    let mut step_losses = Vec::with_capacity(total);
    let mut best = f64::INFINITY;
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut step_rng(cfg.seed, 1, epoch));
        let mut sums = [0.0; 5];
        let mut n_batches = 0;
        let mut lr = cfg.lr;
        for batch in order.chunks(cfg.batch_size) {
            if step == total {
                break;
            }
            let prepared = par_map(batch, workers, |&i| prepare(cfg, &samples[i], epoch, i));
            let rails: Vec<Vec<RailAnnotation>> = prepared.iter().map(|(_, r)| r.clone()).collect();
            let targets: Vec<TargetMaps> = rails.iter().map(|r| TargetMaps::encode(r, &grid, &codec)).collect();
            let images: Vec<&RgbImage> = prepared.iter().map(|(im, _)| im).collect();
            let x = batch_tensor(&images, DType::F32, &device)?;

            lr = cosine_lr(cfg.lr, step, total);
            opt.set_learning_rate(lr);
            let mut jitter_rng = step_rng(cfg.seed, 2, step);
            let jitter = (!cfg.anchor_jitter.is_zero()).then_some((&mut jitter_rng, cfg.anchor_jitter));
            let parts = model.forward_train(&x, &targets, &rails, &cfg.loss, jitter)?;
            let loss = total_loss(&parts, &cfg.loss).map_err(|e| match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { batch: step, detail },
                other => other,
            })?;
            let values = parts.values()?;
            opt.backward_step(&loss)?;

            let t = values.total(&cfg.loss);
            log::debug!("step {step} lr {lr:.3e} loss {t:.4}");
            step_losses.push(t);
            for (s, v) in sums.iter_mut().zip(values.as_array()) {
                *s += v;
            }
            n_batches += 1;
            step += 1;
        }
        let m = sums.map(|s| s / n_batches as f64);
        let loss = LossValues {
            heat: m[0],
            offset: m[1],
            slope: m[2],
            range: m[3],
            line_iou: m[4],
        };
        let entry = EpochLog {
            epoch,
            steps: step,
            lr,
            total: loss.total(&cfg.loss),
            loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} step {step}/{total} loss {:.4} (heat {:.4} offset {:.4} slope {:.4} range {:.4} liou {:.4}) lr {lr:.2e} {:.1}s",
            entry.total,
            loss.heat,
            loss.offset,
            loss.slope,
            loss.range,
            loss.line_iou,
            entry.seconds
        );
        serde_json::to_writer(&mut log_file, &entry)?;
        log_file.write_all(b"\n")?;
        if entry.total < best {
            best = entry.total;
            checkpoint::save(&best_path, &model, &meta(cfg, epoch, step, entry.total))?;
        }
        history.push(entry);
        epoch += 1;
    }
    log_file.flush()?;
    let last = history.last().map_or(f64::NAN, |e| e.total);
    checkpoint::save(&final_path, &model, &meta(cfg, epoch.saturating_sub(1), step, last))?;
    Ok(TrainOutcome {
        model,
        history,
        step_losses,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    })
}

fn meta(cfg: &TrainConfig, epoch: usize, step: usize, loss: f64) -> serde_json::Value {
    serde_json::json!({
        "train_config": cfg,
        "epoch": epoch,
        "step": step,
        "epoch_loss": loss,
    })
}
