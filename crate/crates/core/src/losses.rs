//! Training objectives, written as differentiable tensor expressions.
//!
//! Map-shaped losses take `(B, C, H, W)` tensors and per-image rail counts.
//! Each image's sum is normalised by its own rail count (and supervision
//! area where applicable) and the batch result is the mean over images.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Heatmap predictions are clamped into `[HEAT_EPS, 1 - HEAT_EPS]` before logs.
pub const HEAT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub heat: f64,
    pub offset: f64,
    pub slope: f64,
    pub range: f64,
    pub line_iou: f64,
    /// Focal exponent on the prediction terms.
    pub alpha: f64,
    /// Focal exponent on the penalty-reduction term.
    pub beta: f64,
    /// Half-width `e` of the thickened line, pixels.
    pub liou_radius: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            heat: 1.0,
            offset: 1.0,
            slope: 3.0,
            range: 0.3,
            line_iou: 6.0,
            alpha: 2.0,
            beta: 4.0,
            liou_radius: 7.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.heat, self.offset, self.slope, self.range, self.line_iou];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.liou_radius > 0.0) {
            return Err(Error::Config("liou_radius must be positive".into()));
        }
        Ok(())
    }
}

/// The five loss terms as graph tensors (scalars).
#[derive(Debug, Clone)]
pub struct LossParts {
    pub heat: Tensor,
    pub offset: Tensor,
    pub slope: Tensor,
    pub range: Tensor,
    pub line_iou: Tensor,
}

/// Plain values of the five loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub heat: f64,
    pub offset: f64,
    pub slope: f64,
    pub range: f64,
    pub line_iou: f64,
}

impl LossValues {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.heat * self.heat + w.offset * self.offset + w.slope * self.slope + w.range * self.range + w.line_iou * self.line_iou
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.heat, self.offset, self.slope, self.range, self.line_iou]
    }

    pub fn non_finite(&self) -> Option<&'static str> {
        let names = ["heat", "offset", "slope", "range", "line_iou"];
        names.into_iter().zip(self.as_array()).find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

impl LossParts {
    pub fn values(&self) -> Result<LossValues> {
        let get = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossValues {
            heat: get(&self.heat)?,
            offset: get(&self.offset)?,
            slope: get(&self.slope)?,
            range: get(&self.range)?,
            line_iou: get(&self.line_iou)?,
        })
    }
}

/// Weighted sum of the loss terms.
///
/// Fails without producing a tensor when any term is non-finite.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<Tensor> {
    let values = parts.values()?;
    if let Some(name) = values.non_finite() {
        return Err(Error::NonFiniteLoss {
            batch: 0,
            detail: format!("{name} loss is not finite ({values:?})"),
        });
    }
    let total = ((parts.heat.affine(w.heat, 0.0)? + parts.offset.affine(w.offset, 0.0)?)?
        + (parts.slope.affine(w.slope, 0.0)? + parts.range.affine(w.range, 0.0)?)?)?;
    Ok((total + parts.line_iou.affine(w.line_iou, 0.0)?)?)
}

/// `1 / max(n, 1)` per image as a `(B,)` tensor.
fn inverse_counts(counts: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n.max(1.0)).collect();
    Ok(Tensor::from_vec(inv, counts.len(), device)?.to_dtype(dtype)?)
}

/// Sum over every axis but the batch, weighted per image, averaged over the batch.
fn normalised_batch_mean(per_cell: &Tensor, counts: &[f64]) -> Result<Tensor> {
    let b = per_cell.dim(0)?;
    let sums = per_cell.flatten_from(1)?.sum(1)?;
    let inv = inverse_counts(counts, per_cell.dtype(), per_cell.device())?;
    Ok((sums * inv)?.sum_all()?.affine(1.0 / b as f64, 0.0)?)
}

/// `0.5 d^2` for `|d| < 1`, `|d| - 0.5` otherwise, elementwise.
pub fn smooth_l1(d: &Tensor) -> Result<Tensor> {
    let a = d.abs()?;
    let inner = a.clamp(0.0, 1.0)?;
    Ok(((inner.sqr()? * 0.5)? + (a - inner)?)?)
}

/// Penalty-reduced focal loss on a `(B, 1, H, W)` heatmap.
///
/// Cells whose target equals exactly 1 are positives.
pub fn focal_heatmap_loss(pred: &Tensor, target: &Tensor, n_rails: &[usize], alpha: f64, beta: f64) -> Result<Tensor> {
    let p = pred.clamp(HEAT_EPS, 1.0 - HEAT_EPS)?;
    let pos = target.eq(1.0)?.to_dtype(p.dtype())?;
    let neg = pos.affine(-1.0, 1.0)?;
    let one_minus_p = p.affine(-1.0, 1.0)?;
    let pos_term = (one_minus_p.powf(alpha)? * p.log()?)?;
    let neg_weight = target.affine(-1.0, 1.0)?.powf(beta)?;
    let neg_term = ((neg_weight * p.powf(alpha)?)? * one_minus_p.log()?)?;
    let per_cell = ((pos_term * pos)? + (neg_term * neg)?)?;
    let counts: Vec<f64> = n_rails.iter().map(|&n| n as f64).collect();
    Ok(normalised_batch_mean(&per_cell, &counts)?.neg()?)
}

fn region_counts(n_rails: &[usize], radius: usize) -> Vec<f64> {
    let area = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    n_rails.iter().map(|&n| n.max(1) as f64 * area).collect()
}

/// Smooth-L1 on both offset channels over the valid region.
///
/// `valid` is a `(B, 1, H, W)` 0/1 mask.
pub fn offset_loss(pred: &Tensor, target: &Tensor, valid: &Tensor, n_rails: &[usize], radius: usize) -> Result<Tensor> {
    let per_cell = smooth_l1(&(pred - target)?)?.broadcast_mul(valid)?;
    normalised_batch_mean(&per_cell, &region_counts(n_rails, radius))
}

/// L1 on the slope channel over the valid region.
pub fn slope_loss(pred: &Tensor, target: &Tensor, valid: &Tensor, n_rails: &[usize], radius: usize) -> Result<Tensor> {
    let per_cell = ((pred - target)?.abs()? * valid)?;
    normalised_batch_mean(&per_cell, &region_counts(n_rails, radius))
}

/// Mean smooth-L1 over `(M, 2)` normalised `(s, l)` pairs; zero for `M = 0`.
pub fn range_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.elem_count() == 0 {
        return Ok(Tensor::zeros((), pred.dtype(), pred.device())?);
    }
    Ok(smooth_l1(&(pred - target)?)?.mean_all()?)
}

/// `1 - LIoU` averaged over `M` proposals.
///
/// `pred_xs`, `gt_xs` and `valid` are `(M, N)`; `valid` marks the ground
/// truth rows. A proposal with no valid rows contributes 0.
pub fn line_iou_loss(pred_xs: &Tensor, gt_xs: &Tensor, valid: &Tensor, radius: f64) -> Result<Tensor> {
    let m = pred_xs.dim(0)?;
    if m == 0 {
        return Ok(Tensor::zeros((), pred_xs.dtype(), pred_xs.device())?);
    }
    let gap = (pred_xs - gt_xs)?.abs()?;
    let overlap = (gap.affine(-1.0, 2.0 * radius)? * valid)?.sum(D::Minus1)?;
    let union = (gap.affine(1.0, 2.0 * radius)? * valid)?.sum(D::Minus1)?;
    let has_rows = valid.sum(D::Minus1)?.gt(0.0)?.to_dtype(pred_xs.dtype())?;
    // empty rows: union 0 -> divide by 1 and mask out
    let safe_union = (union + has_rows.affine(-1.0, 1.0)?)?;
    let liou = (overlap / safe_union)?;
    let loss = (liou.affine(-1.0, 1.0)? * has_rows)?;
    Ok(loss.mean_all()?)
}
