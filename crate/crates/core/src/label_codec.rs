//! Ground-truth target maps for the anchor line generator, and peak decoding.
//!
//! Cell coordinates are `(col, row)` on a map of `W / stride` by `H / stride`
//! cells. A rail's starting point `p` lands in cell `floor(p / stride)`.

use log::warn;

use crate::geometry::{clamp_theta, rail_slope, AnchorLine, ImageGrid, RailAnnotation};

/// Stride of the feature level the generator runs on.
pub const DEFAULT_STRIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    pub stride: usize,
    /// Gaussian width, in cells.
    pub sigma: f64,
    /// Half-width of the square supervision region, in cells.
    pub radius: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            stride: DEFAULT_STRIDE,
            sigma: 2.0,
            radius: 2,
        }
    }
}

/// Dense row-major 2-D map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Map2<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "map data size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn contains(&self, col: i64, row: i64) -> bool {
        col >= 0 && row >= 0 && (col as usize) < self.width && (row as usize) < self.height
    }
}

/// Per-rail data the codec derived while encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedStart {
    /// Index into the input rail list.
    pub rail_index: usize,
    /// Starting point in pixels.
    pub point: (f64, f64),
    /// Downsampled start cell `(col, row)`.
    pub cell: (usize, usize),
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub heatmap: Map2<f64>,
    /// `[x, y]` offsets in stride units.
    pub offsets: Map2<[f64; 2]>,
    pub slopes: Map2<f64>,
    pub valid_mask: Map2<bool>,
    /// Owning rail index (into the input list), `-1` for background.
    pub instance_id: Map2<i32>,
    pub starts: Vec<EncodedStart>,
    pub radius: usize,
}

impl TargetMaps {
    pub fn encode(rails: &[RailAnnotation], grid: &ImageGrid, cfg: &CodecConfig) -> Self {
        let heatmap = encode_heatmap(rails, grid, cfg.stride, cfg.sigma);
        let (offsets, slopes, valid_mask, instance_id, starts) =
            encode_offsets_and_slopes(rails, grid, cfg.stride, cfg.radius);
        Self {
            heatmap,
            offsets,
            slopes,
            valid_mask,
            instance_id,
            starts,
            radius: cfg.radius,
        }
    }

    /// Number of rails that produced a target (the loss normaliser `N_p`).
    pub fn n_rails(&self) -> usize {
        self.starts.len()
    }

    pub fn n_valid(&self) -> usize {
        self.valid_mask.data.iter().filter(|&&v| v).count()
    }
}

pub fn map_size(grid: &ImageGrid, stride: usize) -> (usize, usize) {
    (grid.width_px / stride, grid.height_px / stride)
}

/// Starting point and its cell, or `None` when the start lies outside the image.
///
/// A start on the right or bottom border maps to the last cell.
fn start_cell(rail: &RailAnnotation, grid: &ImageGrid, stride: usize) -> Option<((f64, f64), (usize, usize))> {
    let (x, y) = rail.start_point(grid);
    if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 || x > grid.width() || y > grid.height() {
        return None;
    }
    let (w4, h4) = map_size(grid, stride);
    let s = stride as f64;
    let col = ((x / s).floor() as usize).min(w4 - 1);
    let row = ((y / s).floor() as usize).min(h4 - 1);
    Some(((x, y), (col, row)))
}

/// Gaussian heatmap around each rail's start cell, combined with `max`.
pub fn encode_heatmap(rails: &[RailAnnotation], grid: &ImageGrid, stride: usize, sigma: f64) -> Map2<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let (w4, h4) = map_size(grid, stride);
    let mut heat = Map2::filled(w4, h4, 0.0);
    let denom = 2.0 * sigma * sigma;
    for (k, rail) in rails.iter().enumerate() {
        let Some((_, (cx, cy))) = start_cell(rail, grid, stride) else {
            warn!("rail {k}: starting point outside the image, skipped");
            continue;
        };
        for row in 0..h4 {
            for col in 0..w4 {
                let dx = col as f64 - cx as f64;
                let dy = row as f64 - cy as f64;
                let v = (-(dx * dx + dy * dy) / denom).exp();
                let cell = &mut heat.data[row * w4 + col];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    heat
}

#[allow(clippy::type_complexity)]
pub fn encode_offsets_and_slopes(
    rails: &[RailAnnotation],
    grid: &ImageGrid,
    stride: usize,
    radius: usize,
) -> (Map2<[f64; 2]>, Map2<f64>, Map2<bool>, Map2<i32>, Vec<EncodedStart>) {
    let (w4, h4) = map_size(grid, stride);
    let mut offsets = Map2::filled(w4, h4, [0.0; 2]);
    let mut slopes = Map2::filled(w4, h4, 0.0);
    let mut mask = Map2::filled(w4, h4, false);
    let mut owner = Map2::filled(w4, h4, -1i32);
    // distance of the current owner's start to each cell, stride units
    let mut owner_dist = Map2::filled(w4, h4, f64::INFINITY);
    let mut starts = Vec::new();
    let s = stride as f64;
    let r = radius as i64;

    for (k, rail) in rails.iter().enumerate() {
        let Some(((x, y), (cx, cy))) = start_cell(rail, grid, stride) else {
            continue;
        };
        let Ok(slope) = rail_slope(rail, grid) else {
            continue;
        };
        let (px, py) = (x / s, y / s);
        for ty in -r..=r {
            for tx in -r..=r {
                let col = cx as i64 + tx;
                let row = cy as i64 + ty;
                if !mask.contains(col, row) {
                    continue;
                }
                let (col, row) = (col as usize, row as usize);
                let d = ((col as f64 - px).powi(2) + (row as f64 - py).powi(2)).sqrt();
                // strict comparison keeps the earlier rail on ties
                if d < *owner_dist.get(col, row) {
                    owner_dist.set(col, row, d);
                    owner.set(col, row, k as i32);
                    mask.set(col, row, true);
                    offsets.set(col, row, [px - cx as f64 - tx as f64, py - cy as f64 - ty as f64]);
                    slopes.set(col, row, slope);
                }
            }
        }
        starts.push(EncodedStart {
            rail_index: k,
            point: (x, y),
            cell: (cx, cy),
            slope,
        });
    }
    (offsets, slopes, mask, owner, starts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub col: usize,
    pub row: usize,
    pub value: f64,
}

/// 3x3 max pooling with edge cells ignored (same-size output).
fn max_pool3(heat: &Map2<f64>) -> Map2<f64> {
    let (w, h) = (heat.width, heat.height);
    let mut horiz = Map2::filled(w, h, f64::NEG_INFINITY);
    for row in 0..h {
        for col in 0..w {
            let lo = col.saturating_sub(1);
            let hi = (col + 1).min(w - 1);
            let m = (lo..=hi).map(|c| *heat.get(c, row)).fold(f64::NEG_INFINITY, f64::max);
            horiz.set(col, row, m);
        }
    }
    let mut out = Map2::filled(w, h, f64::NEG_INFINITY);
    for row in 0..h {
        let lo = row.saturating_sub(1);
        let hi = (row + 1).min(h - 1);
        for col in 0..w {
            let m = (lo..=hi).map(|r| *horiz.get(col, r)).fold(f64::NEG_INFINITY, f64::max);
            out.set(col, row, m);
        }
    }
    out
}

/// Peaks of a heatmap: cells equal to their 3x3 max-pooled value AND above
/// `threshold`. Among equal neighbours only the lexicographically smallest
/// `(row, col)` survives. Returns at most `k_max` peaks, highest first.
pub fn extract_peaks(heat: &Map2<f64>, k_max: usize, threshold: f64) -> Vec<Peak> {
    if heat.width == 0 || heat.height == 0 {
        return Vec::new();
    }
    let pooled = max_pool3(heat);
    let (w, h) = (heat.width, heat.height);
    let mut peaks = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let v = *heat.get(col, row);
            if !(v == *pooled.get(col, row) && v >= threshold) {
                continue;
            }
            // plateau tie-break: an equal neighbour that precedes this cell in
            // row-major order suppresses it
            let preceded = [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1)].iter().any(|&(dr, dc)| {
                let (r, c) = (row as i64 + dr, col as i64 + dc);
                heat.contains(c, r) && *heat.get(c as usize, r as usize) == v
            });
            if !preceded {
                peaks.push(Peak { col, row, value: v });
            }
        }
    }
    peaks.sort_by(|a, b| b.value.total_cmp(&a.value).then((a.row, a.col).cmp(&(b.row, b.col))));
    peaks.truncate(k_max);
    peaks
}

/// Anchor line from a peak and the offset/slope predictions at its cell.
///
/// Returns `None` when the prediction at the peak is not finite.
pub fn build_anchor(peak: &Peak, offsets: &Map2<[f64; 2]>, slopes: &Map2<f64>, stride: usize) -> Option<AnchorLine> {
    let [ox, oy] = *offsets.get(peak.col, peak.row);
    let theta = *slopes.get(peak.col, peak.row);
    if !(ox.is_finite() && oy.is_finite() && theta.is_finite()) {
        return None;
    }
    let s = stride as f64;
    Some(AnchorLine {
        x_start: s * (peak.col as f64 + ox),
        y_start: s * (peak.row as f64 + oy),
        theta: clamp_theta(theta),
        score: peak.value,
    })
}
