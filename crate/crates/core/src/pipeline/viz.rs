//! Static overlays: anchor rays and decoded rails drawn onto frames.

use image::{Rgb, RgbImage};

use super::infer::FramePrediction;
use crate::geometry::AnchorLine;
use crate::synth::{DatasetRecord, FrameMap};

const PALETTE: [[u8; 3]; 6] = [
    [255, 64, 64],
    [64, 160, 255],
    [64, 255, 96],
    [255, 200, 32],
    [224, 64, 255],
    [32, 255, 240],
];

pub fn instance_color(k: usize) -> Rgb<u8> {
    Rgb(PALETTE[k % PALETTE.len()])
}

/// Dimmed instance color used for anchor rays.
pub fn anchor_color(k: usize) -> Rgb<u8> {
    Rgb(PALETTE[k % PALETTE.len()].map(|c| c / 2 + 64))
}

#[derive(Debug, Clone, Default)]
pub struct Overlay {
    /// Frame-pixel polylines.
    pub rails: Vec<Vec<(f64, f64)>>,
    /// Ray segments `(start, end)` in frame pixels.
    pub anchors: Vec<((f64, f64), (f64, f64))>,
}

impl Overlay {
    pub fn from_prediction(p: &FramePrediction) -> Self {
        let anchors = p.detections.iter().map(|d| anchor_segment(&d.proposal.anchor, &p.map)).collect();
        Self {
            rails: p.rails.clone(),
            anchors,
        }
    }

    /// Rails of a prediction record; records carry no anchors.
    pub fn from_record(r: &DatasetRecord) -> Self {
        Self {
            rails: (0..r.lanes.len()).map(|k| r.lane_points(k)).collect(),
            anchors: Vec::new(),
        }
    }
}

/// The anchor ray from its start up to the top of the network view, in
/// frame pixels.
pub fn anchor_segment(a: &AnchorLine, map: &FrameMap) -> ((f64, f64), (f64, f64)) {
    let end = (a.x_at_row(0.0), 0.0);
    (map.inverse((a.x_start, a.y_start)), map.inverse(end))
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Draws a segment with a square pen of side `2 * half + 1`, stepping one
/// pixel along the major axis. Both end pixels are always covered.
pub fn draw_segment(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), half: i64, c: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) || n > 1 << 16 {
        return;
    }
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = ((x0 + (x1 - x0) * t).floor() as i64, (y0 + (y1 - y0) * t).floor() as i64);
        for dy in -half..=half {
            for dx in -half..=half {
                put(img, x + dx, y + dy, c);
            }
        }
    }
}

/// Copy of `frame` with rails (3 px) and anchor rays (1 px) drawn on it.
pub fn draw_overlay(frame: &RgbImage, overlay: &Overlay) -> RgbImage {
    let mut img = frame.clone();
    for (k, &(a, b)) in overlay.anchors.iter().enumerate() {
        draw_segment(&mut img, a, b, 0, anchor_color(k));
    }
    for (k, rail) in overlay.rails.iter().enumerate() {
        for w in rail.windows(2) {
            draw_segment(&mut img, w[0], w[1], 1, instance_color(k));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Preprocess;

    #[test]
    fn empty_overlay_is_a_copy() {
        let mut img = RgbImage::new(64, 48);
        img.put_pixel(3, 4, Rgb([9, 9, 9]));
        assert_eq!(draw_overlay(&img, &Overlay::default()), img);
    }

    #[test]
    fn anchor_ray_hits_its_start_pixel() {
        let map = Preprocess::default().frame_map(1280, 720);
        let a = AnchorLine::new(400.0, 300.0, 1.2, 0.9);
        let overlay = Overlay {
            rails: Vec::new(),
            anchors: vec![anchor_segment(&a, &map)],
        };
        let img = draw_overlay(&RgbImage::new(1280, 720), &overlay);
        let (sx, sy) = map.inverse((400.0, 300.0));
        assert_eq!(img.get_pixel(sx.floor() as u32, sy.floor() as u32), &anchor_color(0));
    }

    #[test]
    fn one_detection_draws_one_ray_and_one_rail() {
        let overlay = Overlay {
            rails: vec![vec![(100.0, 700.0), (150.0, 500.0), (180.0, 400.0)]],
            anchors: vec![((300.0, 700.0), (400.0, 330.0))],
        };
        let img = draw_overlay(&RgbImage::new(1280, 720), &overlay);
        let mut colors = std::collections::BTreeSet::new();
        for p in img.pixels() {
            if p.0 != [0, 0, 0] {
                colors.insert(p.0);
            }
        }
        let expected: std::collections::BTreeSet<[u8; 3]> = [instance_color(0).0, anchor_color(0).0].into();
        assert_eq!(colors, expected);
        assert_eq!(img.get_pixel(100, 699), &instance_color(0));
        assert_eq!(img.get_pixel(300, 699), &anchor_color(0));
    }
}
