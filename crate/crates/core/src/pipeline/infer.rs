//! Inference on raw frames and conversion back to frame coordinates.

use std::path::{Path, PathBuf};

use image::RgbImage;

use super::data::{batch_tensor, data_root, load_image};
use crate::error::Result;
use crate::geometry::{decode_proposal, ImageGrid};
use crate::network::{DalNet, Detection};
use crate::synth::dataset::{lane_from_polyline, read_dataset, DatasetRecord};
use crate::synth::{FrameMap, Preprocess};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub k_max: usize,
    pub threshold: f64,
    /// Row spacing of the emitted `h_samples`, frame pixels.
    pub h_sample_step: usize,
    pub batch_size: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            k_max: 2,
            threshold: 0.3,
            h_sample_step: 10,
            batch_size: 4,
        }
    }
}

/// Detections of one frame, decoded to frame coordinates.
#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub record: DatasetRecord,
    pub detections: Vec<Detection>,
    /// Decoded rails as frame-pixel polylines, aligned with `detections`.
    pub rails: Vec<Vec<(f64, f64)>>,
    pub map: FrameMap,
}

/// Frame-pixel polyline of a detection, or `None` if it decodes to fewer
/// than two rows.
pub fn detection_polyline(det: &Detection, grid: &ImageGrid, map: &FrameMap) -> Option<Vec<(f64, f64)>> {
    let rail = decode_proposal(&det.proposal, grid).ok()?;
    Some(rail.points(grid).into_iter().map(|p| map.inverse(p)).collect())
}

/// Runs the model on frames of any size; `frames` holds `(raw_file, image)`.
pub fn predict_frames(model: &DalNet, pre: &Preprocess, frames: &[(String, RgbImage)], opts: &InferOptions) -> Result<Vec<FramePrediction>> {
    let grid = model.config().grid();
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(opts.batch_size.max(1)) {
        let inputs: Vec<RgbImage> = chunk.iter().map(|(_, im)| pre.apply_image(im)).collect();
        let refs: Vec<&RgbImage> = inputs.iter().collect();
        let x = batch_tensor(&refs, model.dtype(), model.device())?;
        let dets = model.forward_infer(&x, opts.k_max, opts.threshold)?;
        for ((name, frame), dets) in chunk.iter().zip(dets) {
            let (w, h) = (frame.width() as usize, frame.height() as usize);
            let map = pre.frame_map(w, h);
            let h_samples: Vec<f64> = (0..h).step_by(opts.h_sample_step.max(1)).map(|y| y as f64).collect();
            let mut lanes = Vec::new();
            let mut scores = Vec::new();
            let mut kept = Vec::new();
            let mut rails = Vec::new();
            for det in dets {
                let Some(poly) = detection_polyline(&det, &grid, &map) else {
                    continue;
                };
                let lane = lane_from_polyline(&poly, &h_samples, w as f64);
                if lane.iter().filter(|&&x| x >= 0.0).count() < 2 {
                    continue;
                }
                lanes.push(lane);
                scores.push(det.proposal.score);
                kept.push(det);
                rails.push(poly);
            }
            out.push(FramePrediction {
                record: DatasetRecord {
                    raw_file: name.clone(),
                    h_samples,
                    lanes,
                    scores: Some(scores),
                },
                detections: kept,
                rails,
                map,
            });
        }
    }
    Ok(out)
}

/// Images named in a dataset file (relative to it), or plain image paths.
pub fn resolve_inputs(inputs: &[PathBuf]) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for p in inputs {
        let is_jsonl = p.extension().is_some_and(|e| e == "jsonl" || e == "json");
        if is_jsonl {
            let root = data_root(p);
            out.extend(read_dataset(p)?.into_iter().map(|r| {
                let path = root.join(&r.raw_file);
                (r.raw_file, path)
            }));
        } else {
            out.push((p.to_string_lossy().into_owned(), p.clone()));
        }
    }
    Ok(out)
}

pub struct InferOutcome {
    pub predictions: Vec<FramePrediction>,
    /// Inputs that could not be read, with the reason.
    pub failures: Vec<(PathBuf, String)>,
}

/// Loads the listed images (skipping unreadable ones) and predicts them.
pub fn infer_paths(model: &DalNet, pre: &Preprocess, inputs: &[(String, PathBuf)], opts: &InferOptions) -> Result<InferOutcome> {
    let mut frames = Vec::new();
    let mut failures = Vec::new();
    for (name, path) in inputs {
        match load_image(path) {
            Ok(im) => frames.push((name.clone(), im)),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                failures.push((path.clone(), e.to_string()));
            }
        }
    }
    Ok(InferOutcome {
        predictions: predict_frames(model, pre, &frames, opts)?,
        failures,
    })
}

/// Convenience for a dataset file: predictions for every record in it.
pub fn infer_dataset(model: &DalNet, pre: &Preprocess, annotation: &Path, opts: &InferOptions) -> Result<InferOutcome> {
    infer_paths(model, pre, &resolve_inputs(&[annotation.to_path_buf()])?, opts)
}
