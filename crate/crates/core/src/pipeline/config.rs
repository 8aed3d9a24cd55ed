//! Training configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::{AnchorJitter, ModelConfig};
use crate::synth::{AugmentConfig, Preprocess};

/// Everything `train` needs. Stored as JSON; every field can be overridden
/// from the command line, nested ones by dotted path (`loss.slope`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// JSON-lines annotation file; image paths are relative to its directory.
    pub train_data: PathBuf,
    /// Checkpoints and logs are written here.
    pub out_dir: PathBuf,
    pub epochs: usize,
    /// Caps the optimizer steps; the cosine schedule spans the capped run.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Supervision radius in heatmap cells.
    pub r: usize,
    /// Heatmap Gaussian sigma in cells.
    pub sigma: f64,
    pub k_max: usize,
    pub threshold: f64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Perturbation of the teacher-forced anchors the head trains on.
    pub anchor_jitter: AnchorJitter,
    pub loss: LossWeights,
    pub model: ModelConfig,
    pub preprocess: Preprocess,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_data: PathBuf::from("data/annotations.jsonl"),
            out_dir: PathBuf::from("runs/default"),
            epochs: 70,
            max_steps: None,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            r: 2,
            sigma: 2.0,
            k_max: 2,
            threshold: 0.3,
            augment: true,
            augmentation: AugmentConfig::default(),
            anchor_jitter: AnchorJitter::default(),
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            preprocess: Preprocess::default(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.k_max == 0 {
            return bad("epochs, batch_size and k_max must be positive".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad(format!("invalid lr {} / weight_decay {}", self.lr, self.weight_decay));
        }
        if self.r > 3 {
            return bad(format!("r must be in 0..=3, got {}", self.r));
        }
        if !(self.sigma > 0.0) || !(0.0..=1.0).contains(&self.threshold) || !(self.anchor_jitter.position_px >= 0.0 && self.anchor_jitter.slope_rad >= 0.0) {
            return bad("sigma must be positive, threshold in [0, 1], jitter non-negative".into());
        }
        if (self.preprocess.out_width, self.preprocess.out_height) != (self.model.input_width, self.model.input_height) {
            return bad("preprocess output size must equal the model input size".into());
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Sets one field from its dotted path; `value` is parsed as JSON and
    /// falls back to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config field `{key}`")))?;
        }
        *slot = parsed;
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{key}={value}: {e}")))?;
        Ok(())
    }
}

/// Cosine annealing from `base` at step 0 to 0 at step `total - 1`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Worker count for data preparation: `DALNET_NUM_WORKERS` if set, else
/// the available parallelism.
pub fn num_workers() -> usize {
    std::env::var("DALNET_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
