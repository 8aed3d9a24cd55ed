//! Procedural rail scenes.
//!
//! Each scene is a ground plane with ballast texture, sleepers, and one
//! track of two rails converging toward a vanishing point. The track centre
//! line is quadratic in the perspective depth parameter `t` (0 at the bottom
//! row, 1 at the horizon) and the half gauge shrinks linearly with `t`, so
//! zero curvature yields two straight rails. Labels are the generating
//! curves and do not change when occluders are drawn.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{lane_from_polyline, DatasetRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Horizon row as a fraction of the height.
    pub horizon_frac: f64,
    /// Top end of the rails as a fraction of the height.
    pub rail_top_frac: (f64, f64),
    /// Track centre at the bottom row, fraction of the width.
    pub center_frac: (f64, f64),
    /// Distance between the rails at the bottom row, pixels.
    pub gauge_px: (f64, f64),
    /// Lateral bend of the track centre at the horizon, pixels (signed).
    pub curvature_px: (f64, f64),
    /// Rail strip width at the bottom row, pixels.
    pub rail_width_px: f64,
    pub brightness: (f64, f64),
    /// Standard deviation of additive pixel noise, in 8-bit levels.
    pub noise_std: f64,
    pub occluders: (usize, usize),
    /// Spacing between annotated rows.
    pub h_sample_step: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 1280,
            height: 720,
            horizon_frac: 0.40,
            rail_top_frac: (0.47, 0.52),
            center_frac: (0.40, 0.60),
            gauge_px: (380.0, 520.0),
            curvature_px: (-160.0, 160.0),
            rail_width_px: 16.0,
            brightness: (0.75, 1.15),
            noise_std: 6.0,
            occluders: (0, 2),
            h_sample_step: 10,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene config: {m}")));
        if self.width < 64 || self.height < 64 {
            return bad("image must be at least 64x64");
        }
        let ranges = [self.rail_top_frac, self.center_frac, self.gauge_px, self.curvature_px, self.brightness];
        if ranges.iter().any(|r| !(r.0 <= r.1) || !r.0.is_finite() || !r.1.is_finite()) {
            return bad("every range needs min <= max");
        }
        if self.occluders.0 > self.occluders.1 {
            return bad("occluder range needs min <= max");
        }
        if !(0.0..1.0).contains(&self.horizon_frac) || self.rail_top_frac.0 <= self.horizon_frac || self.rail_top_frac.1 >= 1.0 {
            return bad("need horizon < rail top < 1");
        }
        if self.h_sample_step == 0 || self.noise_std < 0.0 || self.rail_width_px <= 0.0 {
            return bad("step, noise and rail width must be positive");
        }
        Ok(())
    }

    pub fn h_samples(&self) -> Vec<f64> {
        (0..self.height).step_by(self.h_sample_step).map(|y| y as f64).collect()
    }
}

/// Geometry of one generated track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackGeometry {
    pub horizon_y: f64,
    pub top_y: f64,
    pub center_x: f64,
    pub vanish_x: f64,
    pub gauge: f64,
    pub curvature: f64,
}

impl TrackGeometry {
    /// Depth parameter of row `y`: 0 at the bottom edge, 1 at the horizon.
    pub fn depth(&self, y: f64, height: f64) -> f64 {
        (height - y) / (height - self.horizon_y)
    }

    pub fn centre(&self, t: f64) -> f64 {
        self.center_x + (self.vanish_x - self.center_x) * t + self.curvature * t * t
    }

    pub fn half_gauge(&self, t: f64) -> f64 {
        0.5 * self.gauge * (1.0 - t)
    }

    /// x of rail `side` (0 left, 1 right) at row `y`.
    pub fn rail_x(&self, side: usize, y: f64, height: f64) -> f64 {
        let t = self.depth(y, height);
        let sign = if side == 0 { -1.0 } else { 1.0 };
        self.centre(t) + sign * self.half_gauge(t)
    }

    /// Dense rail polyline from the top end to the bottom edge, one point per pixel row.
    pub fn rail_polyline(&self, side: usize, height: usize) -> Vec<(f64, f64)> {
        let h = height as f64;
        let y0 = self.top_y.ceil() as usize;
        (y0..=height)
            .map(|y| {
                let y = y as f64;
                (self.rail_x(side, y, h), y)
            })
            .collect()
    }
}

pub struct Scene {
    pub image: RgbImage,
    pub track: TrackGeometry,
    /// Dense generating polylines in frame pixels, left rail first.
    pub rails: Vec<Vec<(f64, f64)>>,
}

impl Scene {
    pub fn record(&self, raw_file: &str, cfg: &SceneConfig) -> DatasetRecord {
        let hs = cfg.h_samples();
        DatasetRecord {
            raw_file: raw_file.to_string(),
            lanes: self.rails.iter().map(|r| lane_from_polyline(r, &hs, cfg.width as f64)).collect(),
            h_samples: hs,
            scores: None,
        }
    }
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn scene_rng(cfg: &SceneConfig, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    rng
}

pub fn sample_track(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> TrackGeometry {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let center_x = sample_range(rng, cfg.center_frac) * w;
    let gauge = sample_range(rng, cfg.gauge_px);
    let curvature = sample_range(rng, cfg.curvature_px);
    let top_y = sample_range(rng, cfg.rail_top_frac) * h;
    // vanishing point drifts a little from the image centre
    let vanish_x = w * 0.5 + rng.random_range(-0.05..0.05) * w;
    TrackGeometry {
        horizon_y: cfg.horizon_frac * h,
        top_y,
        center_x,
        vanish_x,
        gauge,
        curvature,
    }
}

/// Renders scene `index` of the family defined by `cfg`; the output is a
/// pure function of `(cfg, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg, index);
    let track = sample_track(cfg, &mut rng);
    let brightness = sample_range(&mut rng, cfg.brightness);
    let n_occ = if cfg.occluders.1 > cfg.occluders.0 {
        rng.random_range(cfg.occluders.0..=cfg.occluders.1)
    } else {
        cfg.occluders.0
    };
    // occluders use their own stream so their count never shifts the track
    let mut occ_rng = scene_rng(cfg, index ^ (1 << 40));
    let occluders: Vec<([f64; 4], [u8; 3])> = (0..n_occ)
        .map(|_| {
            let (w, h) = (cfg.width as f64, cfg.height as f64);
            let bw = occ_rng.random_range(0.05..0.18) * w;
            let bh = occ_rng.random_range(0.06..0.20) * h;
            let x0 = occ_rng.random_range(0.0..w - bw);
            let y0 = occ_rng.random_range(track.horizon_y..h - bh);
            let color = [occ_rng.random_range(20..235), occ_rng.random_range(20..235), occ_rng.random_range(20..235)];
            ([x0, y0, x0 + bw, y0 + bh], color)
        })
        .collect();
    let mut noise_rng = scene_rng(cfg, index ^ (1 << 41));

    let image = render(cfg, &track, brightness, &occluders, &mut noise_rng);
    let rails = (0..2).map(|side| track.rail_polyline(side, cfg.height)).collect();
    Ok(Scene { image, track, rails })
}

fn render(cfg: &SceneConfig, track: &TrackGeometry, brightness: f64, occluders: &[([f64; 4], [u8; 3])], rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (cfg.width, cfg.height);
    let hf = h as f64;
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("valid std");
    let sleeper_rows = sleeper_rows(track, hf);
    let mut img = RgbImage::new(w as u32, h as u32);
    for yi in 0..h {
        let y = yi as f64 + 0.5;
        let t = track.depth(y, hf);
        let above = y < track.horizon_y;
        let mut row = vec![[0.0f64; 3]; w];
        for (xi, px) in row.iter_mut().enumerate() {
            *px = if above {
                let k = y / track.horizon_y;
                [150.0 + 40.0 * k, 170.0 + 30.0 * k, 190.0 + 20.0 * k]
            } else {
                // ballast: low-frequency stripes plus grain
                let g = 95.0 + 12.0 * ((xi as f64 * 0.11 + y * 0.07).sin() * (y * 0.05).cos());
                [g + 8.0, g, g - 10.0]
            };
        }
        if !above && y >= track.top_y {
            let half = track.half_gauge(t);
            let c = track.centre(t);
            if sleeper_rows.iter().any(|&(a, b)| y >= a && y < b) {
                let lo = (c - 1.35 * half).max(0.0) as usize;
                let hi = ((c + 1.35 * half).max(0.0) as usize).min(w);
                for px in row.iter_mut().take(hi).skip(lo) {
                    *px = [88.0, 66.0, 48.0];
                }
            }
            let rail_w = cfg.rail_width_px * (1.0 - t) + 1.5;
            for side in 0..2 {
                let xc = track.rail_x(side, y, hf);
                let lo = (xc - rail_w).floor().max(0.0) as usize;
                let hi = ((xc + rail_w).ceil().max(0.0) as usize).min(w);
                for (xi, px) in row.iter_mut().enumerate().take(hi).skip(lo) {
                    // coverage of the pixel by the strip [xc - rw/2, xc + rw/2]
                    let a = (xi as f64).max(xc - rail_w / 2.0);
                    let b = (xi as f64 + 1.0).min(xc + rail_w / 2.0);
                    let cov = (b - a).clamp(0.0, 1.0);
                    let steel = [205.0, 208.0, 215.0];
                    for ch in 0..3 {
                        px[ch] = px[ch] * (1.0 - cov) + steel[ch] * cov;
                    }
                }
            }
        }
        for ([x0, y0, x1, y1], color) in occluders {
            if y >= *y0 && y < *y1 {
                for px in row.iter_mut().take(x1.min(w as f64) as usize).skip(x0.max(0.0) as usize) {
                    *px = color.map(|c| c as f64);
                }
            }
        }
        for (xi, px) in row.iter().enumerate() {
            let v = px.map(|c| (c * brightness + noise.sample(rng)).round().clamp(0.0, 255.0) as u8);
            img.put_pixel(xi as u32, yi as u32, Rgb(v));
        }
    }
    img
}

/// Row intervals covered by sleepers, spaced uniformly in ground distance.
fn sleeper_rows(track: &TrackGeometry, height: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for k in 0..200 {
        // t = d / (d + D) maps ground distance d to depth with D = 8 units
        let d = k as f64 * 0.9;
        let t = d / (d + 8.0);
        let y = height - t * (height - track.horizon_y);
        if y < track.top_y {
            break;
        }
        let thick = 14.0 * (1.0 - t).powi(2) + 0.6;
        out.push((y - thick, y));
    }
    out
}
