//! Detection metrics.
//!
//! Rails are compared as rasterised masks: each polyline is drawn with a
//! 30 px round-capped stroke at the original frame resolution and pairs are
//! scored by mask IoU. Predictions and ground truths are matched one-to-one
//! by a maximum-total-IoU assignment; a matched pair is a true positive at
//! threshold `tau` when its IoU exceeds `tau`. The Tusimple point metrics
//! are provided alongside.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use pathfinding::matrix::Matrix;
use pathfinding::prelude::kuhn_munkres;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::dataset::{DatasetRecord, MISSING};

pub const STROKE_WIDTH: f64 = 30.0;
pub const TUSIMPLE_PIXEL_THRESH: f64 = 20.0;
pub const TUSIMPLE_LANE_THRESH: f64 = 0.85;

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// A binary mask stored as a row-major bitset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            words: vec![0; (width * height).div_ceil(64)],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * self.width + x;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn intersection_count(&self, other: &Mask) -> u64 {
        self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones() as u64).sum()
    }

    pub fn union_count(&self, other: &Mask) -> u64 {
        self.words.iter().zip(&other.words).map(|(a, b)| (a | b).count_ones() as u64).sum()
    }
}

fn dist2_to_segment((px, py): (f64, f64), (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx - px, ay + t * dy - py);
    cx * cx + cy * cy
}

/// Draws a polyline with round joins and caps: a pixel is set iff its
/// centre lies within `stroke_width / 2` of the polyline. Fewer than two
/// points give an empty mask.
pub fn rasterize_rail(points: &[(f64, f64)], stroke_width: f64, width: usize, height: usize) -> Mask {
    let mut mask = Mask::new(width, height);
    if points.len() < 2 {
        return mask;
    }
    let r = stroke_width / 2.0;
    let r2 = r * r;
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let x0 = (a.0.min(b.0) - r - 0.5).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + r).ceil().max(0.0) as usize).min(width);
        let y0 = (a.1.min(b.1) - r - 0.5).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + r).ceil().max(0.0) as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                if dist2_to_segment((x as f64 + 0.5, y as f64 + 0.5), a, b) <= r2 {
                    mask.set(x, y);
                }
            }
        }
    }
    mask
}

/// `|a & b| / |a | b|`, 0 when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height), "masks must share a canvas");
    let union = a.union_count(b);
    if union == 0 {
        0.0
    } else {
        a.intersection_count(b) as f64 / union as f64
    }
}

/// Detection counts at one threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

// IoU is quantised to 1e-9 and shifted left; the low bits carry a score
// bonus that only decides between assignments of equal total IoU.
const IOU_QUANT: f64 = 1e9;
const BONUS_BITS: u32 = 20;
const BONUS_MAX: f64 = 1023.0;

/// Maximum-total-IoU one-to-one assignment between predictions (rows of
/// `iou`) and ground truths (columns). Among equal-IoU assignments, the one
/// that matches higher-scoring predictions wins. Returns `(pred, gt)` pairs
/// with positive IoU.
pub fn assign(iou: &[Vec<f64>], scores: &[f64]) -> Vec<(usize, usize)> {
    let n_pred = iou.len();
    let n_gt = iou.first().map_or(0, Vec::len);
    if n_pred == 0 || n_gt == 0 {
        return Vec::new();
    }
    assert!(n_pred.max(n_gt) < 1024, "too many instances for the assignment weights");
    let weight = |p: usize, g: usize| -> i64 {
        let v = iou[p][g];
        if v <= 0.0 {
            return 0;
        }
        let bonus = (scores[p].clamp(0.0, 1.0) * BONUS_MAX).round() as i64;
        ((v * IOU_QUANT).round() as i64) << BONUS_BITS | bonus
    };
    let pairs: Vec<(usize, usize)> = if n_pred <= n_gt {
        let m = Matrix::from_fn(n_pred, n_gt, |(p, g)| weight(p, g));
        let (_, cols) = kuhn_munkres(&m);
        cols.into_iter().enumerate().collect()
    } else {
        let m = Matrix::from_fn(n_gt, n_pred, |(g, p)| weight(p, g));
        let (_, rows) = kuhn_munkres(&m);
        rows.into_iter().enumerate().map(|(g, p)| (p, g)).collect()
    };
    let mut out: Vec<(usize, usize)> = pairs.into_iter().filter(|&(p, g)| iou[p][g] > 0.0).collect();
    out.sort_unstable();
    out
}

/// TP/FP/FN for one image at threshold `tau`.
pub fn match_and_count(iou: &[Vec<f64>], scores: &[f64], n_gt: usize, tau: f64) -> Counts {
    count_from_pairs(iou, &assign(iou, scores), iou.len(), n_gt, tau)
}

fn count_from_pairs(iou: &[Vec<f64>], pairs: &[(usize, usize)], n_pred: usize, n_gt: usize, tau: f64) -> Counts {
    let tp = pairs.iter().filter(|&&(p, g)| iou[p][g] > tau).count() as u64;
    Counts {
        tp,
        fp: n_pred as u64 - tp,
        fn_: n_gt as u64 - tp,
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub tau: f64,
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ThresholdScore {
    pub fn new(tau: f64, counts: Counts) -> Self {
        let precision = ratio(counts.tp, counts.tp + counts.fp);
        let recall = ratio(counts.tp, counts.tp + counts.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tau,
            counts,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TusimpleMetrics {
    pub accuracy: f64,
    pub fdr: f64,
    pub fnr: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub n_predictions: u64,
    pub n_ground_truths: u64,
    pub thresholds: Vec<ThresholdScore>,
    pub mf1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tusimple: Option<TusimpleMetrics>,
}

impl EvalReport {
    /// F1 at the threshold closest to `tau`.
    pub fn f1_at(&self, tau: f64) -> f64 {
        self.thresholds
            .iter()
            .min_by(|a, b| (a.tau - tau).abs().total_cmp(&(b.tau - tau).abs()))
            .map_or(0.0, |t| t.f1)
    }

    pub fn f1_50(&self) -> f64 {
        self.f1_at(0.50)
    }

    pub fn f1_75(&self) -> f64 {
        self.f1_at(0.75)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images {}  predictions {}  ground truths {}", self.n_images, self.n_predictions, self.n_ground_truths);
        let _ = writeln!(s, "{:>5} {:>7} {:>7} {:>7} {:>9} {:>9} {:>9}", "tau", "TP", "FP", "FN", "precision", "recall", "F1");
        for t in &self.thresholds {
            let _ = writeln!(
                s,
                "{:>5.2} {:>7} {:>7} {:>7} {:>9.4} {:>9.4} {:>9.4}",
                t.tau, t.counts.tp, t.counts.fp, t.counts.fn_, t.precision, t.recall, t.f1
            );
        }
        let _ = writeln!(s, "F1@50 {:.4}  F1@75 {:.4}  mF1 {:.4}", self.f1_50(), self.f1_75(), self.mf1);
        if let Some(t) = &self.tusimple {
            let _ = writeln!(s, "tusimple accuracy {:.4}  FDR {:.4}  FNR {:.4}", t.accuracy, t.fdr, t.fnr);
        }
        s
    }
}

/// Builds the report from dataset-wide counts, one entry per threshold.
pub fn f1_scores(per_tau: &[(f64, Counts)]) -> EvalReport {
    let thresholds: Vec<ThresholdScore> = per_tau.iter().map(|&(tau, c)| ThresholdScore::new(tau, c)).collect();
    let mf1 = if thresholds.is_empty() {
        0.0
    } else {
        thresholds.iter().map(|t| t.f1).sum::<f64>() / thresholds.len() as f64
    };
    let (n_predictions, n_ground_truths) = per_tau.first().map_or((0, 0), |(_, c)| (c.tp + c.fp, c.tp + c.fn_));
    EvalReport {
        n_images: 0,
        n_predictions,
        n_ground_truths,
        thresholds,
        mf1,
        tusimple: None,
    }
}

/// Tusimple accumulators for one image.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TusimpleCounts {
    pub correct_points: u64,
    pub gt_points: u64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl std::ops::AddAssign for TusimpleCounts {
    fn add_assign(&mut self, o: Self) {
        self.correct_points += o.correct_points;
        self.gt_points += o.gt_points;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

impl TusimpleCounts {
    pub fn metrics(&self) -> TusimpleMetrics {
        TusimpleMetrics {
            accuracy: ratio(self.correct_points, self.gt_points),
            fdr: ratio(self.fp, self.tp + self.fp),
            fnr: ratio(self.fn_, self.tp + self.fn_),
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }
}

/// Correct points of `pred` against `gt` (both sampled on the same rows).
fn lane_correct(pred: &[f64], gt: &[f64]) -> u64 {
    pred.iter()
        .zip(gt)
        .filter(|&(&p, &g)| g != MISSING && p != MISSING && (p - g).abs() < TUSIMPLE_PIXEL_THRESH)
        .count() as u64
}

/// Tusimple counts for one image: each ground-truth lane, in order, takes
/// the unused prediction with the most correct points; the pair is a hit
/// when more than 85% of the lane's points are correct.
pub fn tusimple_counts(preds: &[Vec<f64>], gts: &[Vec<f64>]) -> TusimpleCounts {
    let mut used = vec![false; preds.len()];
    let mut c = TusimpleCounts::default();
    for gt in gts {
        let n = gt.iter().filter(|&&x| x != MISSING).count() as u64;
        c.gt_points += n;
        let best = preds
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, p)| (i, lane_correct(p, gt)))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((i, correct)) = best {
            c.correct_points += correct;
            if n > 0 && correct as f64 / n as f64 > TUSIMPLE_LANE_THRESH {
                used[i] = true;
                c.tp += 1;
            }
        }
    }
    c.fp = preds.len() as u64 - c.tp;
    c.fn_ = gts.len() as u64 - c.tp;
    c
}

/// Dataset-level Tusimple metrics over `(predictions, ground truths)` per image.
pub fn tusimple_metrics(images: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)]) -> TusimpleMetrics {
    let mut total = TusimpleCounts::default();
    for (p, g) in images {
        total += tusimple_counts(p, g);
    }
    total.metrics()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Canvas size of the original frames.
    pub width: usize,
    pub height: usize,
    pub stroke_width: f64,
    pub tusimple: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            width: 1280,
            height: 720,
            stroke_width: STROKE_WIDTH,
            tusimple: true,
        }
    }
}

/// Pairwise IoU matrix `[pred][gt]` of one image.
pub fn iou_matrix(preds: &DatasetRecord, gts: &DatasetRecord, opts: &EvalOptions) -> Vec<Vec<f64>> {
    let raster = |r: &DatasetRecord| -> Vec<Mask> {
        (0..r.lanes.len())
            .map(|k| rasterize_rail(&r.lane_points(k), opts.stroke_width, opts.width, opts.height))
            .collect()
    };
    let (pm, gm) = (raster(preds), raster(gts));
    pm.iter().map(|p| gm.iter().map(|g| mask_iou(p, g)).collect()).collect()
}

/// Evaluates prediction records against ground-truth records, keyed by
/// `raw_file`. Both files must cover the same set of images.
pub fn evaluate_records(preds: &[DatasetRecord], gts: &[DatasetRecord], opts: &EvalOptions) -> Result<EvalReport> {
    let pmap: BTreeMap<&str, &DatasetRecord> = preds.iter().map(|r| (r.raw_file.as_str(), r)).collect();
    let gmap: BTreeMap<&str, &DatasetRecord> = gts.iter().map(|r| (r.raw_file.as_str(), r)).collect();
    if pmap.len() != preds.len() || gmap.len() != gts.len() {
        return Err(Error::EvalMismatch("duplicate raw_file entries".into()));
    }
    let pk: BTreeSet<&str> = pmap.keys().copied().collect();
    let gk: BTreeSet<&str> = gmap.keys().copied().collect();
    if pk != gk {
        let missing: Vec<&str> = gk.difference(&pk).copied().collect();
        let extra: Vec<&str> = pk.difference(&gk).copied().collect();
        return Err(Error::EvalMismatch(format!(
            "missing predictions for [{}]; predictions without ground truth [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    let taus = iou_thresholds();
    let mut counts = vec![Counts::default(); taus.len()];
    let mut tus = TusimpleCounts::default();
    for (key, gt) in &gmap {
        let pred = pmap[key];
        if opts.tusimple && pred.h_samples != gt.h_samples && !pred.lanes.is_empty() {
            return Err(Error::EvalMismatch(format!("{key}: prediction h_samples differ from ground truth")));
        }
        let iou = iou_matrix(pred, gt, opts);
        let scores: Vec<f64> = (0..pred.lanes.len()).map(|k| pred.lane_score(k)).collect();
        let pairs = assign(&iou, &scores);
        for (c, &tau) in counts.iter_mut().zip(&taus) {
            *c += count_from_pairs(&iou, &pairs, pred.lanes.len(), gt.lanes.len(), tau);
        }
        if opts.tusimple {
            tus += tusimple_counts(&pred.lanes, &gt.lanes);
        }
    }
    let per_tau: Vec<(f64, Counts)> = taus.into_iter().zip(counts).collect();
    let mut report = f1_scores(&per_tau);
    report.n_images = gmap.len();
    report.n_predictions = preds.iter().map(|r| r.lanes.len() as u64).sum();
    report.n_ground_truths = gts.iter().map(|r| r.lanes.len() as u64).sum();
    report.tusimple = opts.tusimple.then(|| tus.metrics());
    Ok(report)
}
