//! End-to-end commands: synthesise a dataset, train, infer, evaluate and
//! draw overlays. The CLI is a thin layer over these functions.

pub mod config;
pub mod data;
pub mod infer;
pub mod train;
pub mod viz;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_records, EvalOptions, EvalReport};
use crate::synth::{generate_scene, read_dataset, write_dataset, DatasetRecord, SceneConfig};

pub use config::{cosine_lr, num_workers, TrainConfig};
pub use infer::{infer_paths, predict_frames, resolve_inputs, FramePrediction, InferOptions, InferOutcome};
pub use train::{train, train_on, TrainOutcome};

pub const ANNOTATION_FILE: &str = "annotations.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    /// Index of the first scene; disjoint index ranges give disjoint splits.
    pub first_index: u64,
    pub scene: SceneConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 16,
            first_index: 0,
            scene: SceneConfig::default(),
        }
    }
}

fn ensure_empty_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!("{} exists and is not empty (use --force to overwrite)", dir.display())));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Renders `cfg.count` scenes into `out_dir/images` and writes
/// `out_dir/annotations.jsonl`. Output depends only on `cfg`.
pub fn cmd_synth(cfg: &SynthConfig, out_dir: &Path, force: bool) -> Result<Vec<DatasetRecord>> {
    cfg.scene.validate()?;
    ensure_empty_dir(out_dir, force)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    let indices: Vec<u64> = (cfg.first_index..cfg.first_index + cfg.count as u64).collect();
    let records = data::par_map(&indices, num_workers(), |&i| -> Result<DatasetRecord> {
        let scene = generate_scene(&cfg.scene, i)?;
        let name = format!("images/{i:05}.png");
        scene.image.save(out_dir.join(&name))?;
        Ok(scene.record(&name, &cfg.scene))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    write_dataset(&out_dir.join(ANNOTATION_FILE), &records)?;
    Ok(records)
}

/// Evaluates a prediction file against a ground-truth file.
pub fn cmd_eval(pred_file: &Path, gt_file: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let preds = read_dataset(pred_file)?;
    let gts = read_dataset(gt_file)?;
    evaluate_records(&preds, &gts, opts)
}

/// Writes one overlay PNG per frame into `out_dir`, named after the frame.
/// Returns the written paths.
pub fn write_overlays(frames: &[(String, image::RgbImage, viz::Overlay)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(frames.len());
    for (name, frame, overlay) in frames {
        let stem = Path::new(name).file_stem().map_or_else(|| "frame".into(), |s| s.to_string_lossy().into_owned());
        let path = out_dir.join(format!("{stem}_overlay.png"));
        viz::draw_overlay(frame, overlay).save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
