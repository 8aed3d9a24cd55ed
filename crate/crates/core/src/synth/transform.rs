//! Image/label transforms: the crop-and-resize preprocessing that maps raw
//! frames to the network input size, and training-time augmentation.

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{resample_polyline, ImageGrid, RailAnnotation};

/// Crop the top of the frame, then resize to the network input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Preprocess {
    /// Fraction of rows removed from the top (0.45 keeps the bottom 55%).
    pub crop_top_frac: f64,
    pub out_width: usize,
    pub out_height: usize,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            crop_top_frac: 0.45,
            out_width: 800,
            out_height: 320,
        }
    }
}

/// The affine point map of [`Preprocess`] for one source frame size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMap {
    pub src_width: usize,
    pub src_height: usize,
    pub top: usize,
    pub sx: f64,
    pub sy: f64,
}

impl FrameMap {
    pub fn forward(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (x * self.sx, (y - self.top as f64) * self.sy)
    }

    pub fn inverse(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (x / self.sx, y / self.sy + self.top as f64)
    }
}

impl Preprocess {
    pub fn frame_map(&self, src_width: usize, src_height: usize) -> FrameMap {
        let top = ((self.crop_top_frac * src_height as f64).round() as usize).min(src_height.saturating_sub(1));
        FrameMap {
            src_width,
            src_height,
            top,
            sx: self.out_width as f64 / src_width as f64,
            sy: self.out_height as f64 / (src_height - top) as f64,
        }
    }

    pub fn apply_image(&self, image: &RgbImage) -> RgbImage {
        let map = self.frame_map(image.width() as usize, image.height() as usize);
        let cropped = imageops::crop_imm(image, 0, map.top as u32, image.width(), image.height() - map.top as u32).to_image();
        if cropped.width() as usize == self.out_width && cropped.height() as usize == self.out_height {
            return cropped;
        }
        imageops::resize(&cropped, self.out_width as u32, self.out_height as u32, FilterType::Triangle)
    }

    /// Maps raw-frame polylines to rails on the network grid; lanes that
    /// cover fewer than two grid rows after mapping are dropped.
    pub fn apply_lanes(&self, lanes: &[Vec<(f64, f64)>], src_width: usize, src_height: usize, grid: &ImageGrid) -> Vec<RailAnnotation> {
        let map = self.frame_map(src_width, src_height);
        lanes
            .iter()
            .filter_map(|pts| {
                let mapped: Vec<(f64, f64)> = pts.iter().map(|&p| map.forward(p)).collect();
                resample_polyline(&mapped, grid).ok()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    /// Maximum shift as a fraction of the image size, per axis.
    pub max_translate_frac: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_rotation_deg: 6.0,
            max_translate_frac: 0.1,
            scale_range: (0.9, 1.1),
        }
    }
}

/// One concrete augmentation: optional horizontal flip, then rotation and
/// scaling about the image centre, then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub flip: bool,
    pub angle_rad: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        flip: false,
        angle_rad: 0.0,
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn sample<R: Rng>(cfg: &AugmentConfig, width: usize, height: usize, rng: &mut R) -> Self {
        let r = cfg.max_rotation_deg.to_radians();
        let tx = cfg.max_translate_frac * width as f64;
        let ty = cfg.max_translate_frac * height as f64;
        Self {
            flip: rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)),
            angle_rad: if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 },
            scale: if cfg.scale_range.1 > cfg.scale_range.0 {
                rng.random_range(cfg.scale_range.0..=cfg.scale_range.1)
            } else {
                cfg.scale_range.0
            },
            tx: if tx > 0.0 { rng.random_range(-tx..=tx) } else { 0.0 },
            ty: if ty > 0.0 { rng.random_range(-ty..=ty) } else { 0.0 },
        }
    }

    pub fn forward(&self, (x, y): (f64, f64), width: f64, height: f64) -> (f64, f64) {
        let x = if self.flip { width - x } else { x };
        let (cx, cy) = (width / 2.0, height / 2.0);
        let (s, c) = self.angle_rad.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (
            self.scale * (c * dx - s * dy) + cx + self.tx,
            self.scale * (s * dx + c * dy) + cy + self.ty,
        )
    }

    pub fn inverse(&self, (x, y): (f64, f64), width: f64, height: f64) -> (f64, f64) {
        let (cx, cy) = (width / 2.0, height / 2.0);
        let (s, c) = self.angle_rad.sin_cos();
        let (dx, dy) = ((x - cx - self.tx) / self.scale, (y - cy - self.ty) / self.scale);
        let (ux, uy) = (c * dx + s * dy + cx, -s * dx + c * dy + cy);
        (if self.flip { width - ux } else { ux }, uy)
    }

    /// Warps the image with bilinear sampling; uncovered pixels are black.
    pub fn apply_image(&self, image: &RgbImage) -> RgbImage {
        let (w, h) = (image.width(), image.height());
        if *self == Self::IDENTITY {
            return image.clone();
        }
        let (wf, hf) = (w as f64, h as f64);
        let mut out = RgbImage::new(w, h);
        for (j, i, px) in out.enumerate_pixels_mut() {
            let (u, v) = self.inverse((j as f64 + 0.5, i as f64 + 0.5), wf, hf);
            *px = bilinear(image, u - 0.5, v - 0.5);
        }
        out
    }

    /// Maps rails through the transform and re-samples them on `grid`.
    /// Rails left with fewer than two rows inside the image are dropped.
    pub fn apply_rails(&self, rails: &[RailAnnotation], grid: &ImageGrid) -> Vec<RailAnnotation> {
        if *self == Self::IDENTITY {
            return rails.to_vec();
        }
        rails
            .iter()
            .filter_map(|r| {
                let pts: Vec<(f64, f64)> = r.points(grid).into_iter().map(|p| self.forward(p, grid.width(), grid.height())).collect();
                resample_polyline(&pts, grid).ok()
            })
            .collect()
    }
}

fn bilinear(image: &RgbImage, u: f64, v: f64) -> Rgb<u8> {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let mut acc = [0.0f64; 3];
    for (dv, wv) in [(0i64, 1.0 - fv), (1, fv)] {
        for (du, wu) in [(0i64, 1.0 - fu), (1, fu)] {
            let (x, y) = (u0 as i64 + du, v0 as i64 + dv);
            if x < 0 || y < 0 || x >= w || y >= h {
                continue;
            }
            let p = image.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                acc[c] += wu * wv * p[c] as f64;
            }
        }
    }
    Rgb(acc.map(|a| a.round().clamp(0.0, 255.0) as u8))
}

/// Random flip + affine applied identically to the image and its rails.
pub fn augment<R: Rng>(image: &RgbImage, rails: &[RailAnnotation], grid: &ImageGrid, cfg: &AugmentConfig, rng: &mut R) -> (RgbImage, Vec<RailAnnotation>) {
    let aff = Affine::sample(cfg, grid.width_px, grid.height_px, rng);
    (aff.apply_image(image), aff.apply_rails(rails, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> ImageGrid {
        ImageGrid::new(800, 320, 72).unwrap()
    }

    fn curved_rail(g: &ImageGrid) -> RailAnnotation {
        let pts: Vec<(f64, f64)> = (0..=40).map(|k| {
            let y = 100.0 + 5.5 * k as f64;
            (300.0 + 0.002 * (y - 320.0).powi(2) - 0.3 * (320.0 - y), y)
        }).collect();
        resample_polyline(&pts, g).unwrap()
    }

    #[test]
    fn frame_map_roundtrip() {
        let p = Preprocess::default();
        let m = p.frame_map(1280, 720);
        assert_eq!(m.top, 324);
        let q = m.forward((640.0, 720.0));
        assert_abs_diff_eq!(q.0, 400.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.1, 320.0, epsilon = 1e-12);
        let back = m.inverse(m.forward((123.4, 567.8)));
        assert_abs_diff_eq!(back.0, 123.4, epsilon = 1e-9);
        assert_abs_diff_eq!(back.1, 567.8, epsilon = 1e-9);
    }

    #[test]
    fn preprocess_image_size() {
        let img = RgbImage::new(1280, 720);
        let out = Preprocess::default().apply_image(&img);
        assert_eq!((out.width(), out.height()), (800, 320));
    }

    #[test]
    fn flip_twice_restores_labels() {
        let g = grid();
        let rails = vec![curved_rail(&g)];
        let flip = Affine { flip: true, ..Affine::IDENTITY };
        let once = flip.apply_rails(&rails, &g);
        let twice = flip.apply_rails(&once, &g);
        assert_eq!(twice[0].valid_rows(), rails[0].valid_rows());
        for i in rails[0].valid_rows() {
            assert_abs_diff_eq!(twice[0].xs[i], rails[0].xs[i], epsilon = 1e-9);
            assert_abs_diff_eq!(once[0].xs[i], 800.0 - rails[0].xs[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn identity_is_noop() {
        let g = grid();
        let rails = vec![curved_rail(&g)];
        let mut img = RgbImage::new(800, 320);
        img.put_pixel(5, 7, Rgb([1, 2, 3]));
        assert_eq!(Affine::IDENTITY.apply_rails(&rails, &g), rails);
        assert_eq!(Affine::IDENTITY.apply_image(&img), img);
    }

    #[test]
    fn translation_shifts_xs_exactly() {
        let g = grid();
        let rails = vec![curved_rail(&g)];
        let shift = Affine { tx: 10.0, ..Affine::IDENTITY };
        let moved = shift.apply_rails(&rails, &g);
        assert_eq!(moved[0].valid_rows(), rails[0].valid_rows());
        for i in rails[0].valid_rows() {
            assert_abs_diff_eq!(moved[0].xs[i], rails[0].xs[i] + 10.0, epsilon = 1e-9);
        }
        // image moves the same way: a marker pixel lands 10 px to the right
        let mut img = RgbImage::new(800, 320);
        img.put_pixel(100, 50, Rgb([255, 255, 255]));
        let out = shift.apply_image(&img);
        assert_eq!(out.get_pixel(110, 50), &Rgb([255, 255, 255]));
    }

    #[test]
    fn forward_inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let a = Affine::sample(&AugmentConfig::default(), 800, 320, &mut rng);
            let p = (rng.random_range(0.0..800.0), rng.random_range(0.0..320.0));
            let q = a.inverse(a.forward(p, 800.0, 320.0), 800.0, 320.0);
            assert_abs_diff_eq!(p.0, q.0, epsilon = 1e-9);
            assert_abs_diff_eq!(p.1, q.1, epsilon = 1e-9);
        }
    }

    #[test]
    fn augmented_rails_follow_image_markers() {
        // draw the rail as bright dots, augment, check the dots sit on the new rail
        let g = grid();
        let rails = vec![curved_rail(&g)];
        let mut img = RgbImage::new(800, 320);
        for (x, y) in rails[0].points(&g) {
            for dx in -3i64..=3 {
                for dy in -3i64..=3 {
                    let (px, py) = (x as i64 + dx, y as i64 + dy);
                    if (0..800).contains(&px) && (0..320).contains(&py) {
                        img.put_pixel(px as u32, py as u32, Rgb([255, 255, 255]));
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let (out, new_rails) = augment(&img, &rails, &g, &AugmentConfig::default(), &mut rng);
            for rail in &new_rails {
                for (x, y) in rail.points(&g) {
                    if x < 2.0 || x > 797.0 || y < 2.0 || y > 317.0 {
                        continue;
                    }
                    let p = out.get_pixel(x as u32, y as u32);
                    assert!(p[0] > 100, "augmented rail point ({x:.1}, {y:.1}) is off the marker");
                }
            }
        }
    }
}
