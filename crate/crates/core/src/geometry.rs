//! Rail and anchor-line representations.
//!
//! A rail is stored as x-coordinates at `n_rows` fixed image rows spaced
//! uniformly from the top edge (`y = 0`) to the bottom edge (`y = H`), plus a
//! contiguous valid range `[start_index, start_index + length)`. The starting
//! point of a rail is its bottom-most valid point, the one closest to the
//! camera. Anchor lines are rays cast upward from a starting point at angle
//! `theta`, measured from the positive x axis with y pointing up.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Smallest admissible anchor angle; `theta` is clamped to `[THETA_MIN, PI - THETA_MIN]`.
pub const THETA_MIN: f64 = 0.02;

/// Image extent plus the fixed row sampling used for rail coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageGrid {
    pub width_px: usize,
    pub height_px: usize,
    pub n_rows: usize,
}

impl ImageGrid {
    pub fn new(width_px: usize, height_px: usize, n_rows: usize) -> Result<Self> {
        if n_rows < 2 {
            return Err(Error::Config(format!("n_rows must be >= 2, got {n_rows}")));
        }
        if width_px == 0 || height_px == 0 {
            return Err(Error::Config("image size must be nonzero".into()));
        }
        Ok(Self {
            width_px,
            height_px,
            n_rows,
        })
    }

    pub fn width(&self) -> f64 {
        self.width_px as f64
    }

    pub fn height(&self) -> f64 {
        self.height_px as f64
    }

    /// Pixel distance between consecutive sample rows.
    pub fn row_spacing(&self) -> f64 {
        self.height() / (self.n_rows - 1) as f64
    }

    pub fn row_y(&self, i: usize) -> f64 {
        if i == self.n_rows - 1 {
            // exact endpoint, independent of rounding in the product
            return self.height();
        }
        self.height() / (self.n_rows - 1) as f64 * i as f64
    }

    pub fn row_ys(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row_y(i)).collect()
    }
}

/// A rail as x-coordinates on the fixed rows of an [`ImageGrid`].
///
/// Entries of `xs` outside the valid range are unspecified and kept at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RailAnnotation {
    pub xs: Vec<f64>,
    pub start_index: usize,
    pub length: usize,
}

impl RailAnnotation {
    pub fn new(xs: Vec<f64>, start_index: usize, length: usize) -> Result<Self> {
        let rail = Self {
            xs,
            start_index,
            length,
        };
        rail.check_range()?;
        Ok(rail)
    }

    fn check_range(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::InvalidAnnotation(format!(
                "rail length {} < 2",
                self.length
            )));
        }
        if self.start_index + self.length > self.xs.len() {
            return Err(Error::InvalidAnnotation(format!(
                "range s={} l={} exceeds {} rows",
                self.start_index,
                self.length,
                self.xs.len()
            )));
        }
        Ok(())
    }

    /// Checks the range rules and that every valid x is finite and inside the image.
    pub fn validate(&self, grid: &ImageGrid) -> Result<()> {
        if self.xs.len() != grid.n_rows {
            return Err(Error::InvalidAnnotation(format!(
                "expected {} rows, got {}",
                grid.n_rows,
                self.xs.len()
            )));
        }
        self.check_range()?;
        for i in self.valid_rows() {
            let x = self.xs[i];
            if !x.is_finite() || x < 0.0 || x > grid.width() {
                return Err(Error::InvalidAnnotation(format!(
                    "row {i}: x={x} outside [0, {}]",
                    grid.width()
                )));
            }
        }
        Ok(())
    }

    /// Index of the bottom-most valid row.
    pub fn end_index(&self) -> usize {
        self.start_index + self.length - 1
    }

    pub fn valid_rows(&self) -> std::ops::Range<usize> {
        self.start_index..self.start_index + self.length
    }

    /// Starting point (bottom-most valid point) in pixels.
    pub fn start_point(&self, grid: &ImageGrid) -> (f64, f64) {
        let e = self.end_index();
        (self.xs[e], grid.row_y(e))
    }

    /// Valid points as `(x, y)` pixels, top to bottom.
    pub fn points(&self, grid: &ImageGrid) -> Vec<(f64, f64)> {
        self.valid_rows()
            .map(|i| (self.xs[i], grid.row_y(i)))
            .collect()
    }

    /// Reflects the rail about the vertical centre line of the image.
    pub fn mirrored(&self, grid: &ImageGrid) -> Self {
        let mut xs = self.xs.clone();
        for i in self.valid_rows() {
            xs[i] = grid.width() - xs[i];
        }
        Self {
            xs,
            start_index: self.start_index,
            length: self.length,
        }
    }
}

/// Reference ray `(x_start, y_start, theta)` with a confidence score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorLine {
    pub x_start: f64,
    pub y_start: f64,
    pub theta: f64,
    pub score: f64,
}

pub fn clamp_theta(theta: f64) -> f64 {
    theta.clamp(THETA_MIN, PI - THETA_MIN)
}

impl AnchorLine {
    pub fn new(x_start: f64, y_start: f64, theta: f64, score: f64) -> Self {
        Self {
            x_start,
            y_start,
            theta: clamp_theta(theta),
            score,
        }
    }

    /// Anchor built from a rail's starting point and mean slope.
    pub fn from_rail(rail: &RailAnnotation, grid: &ImageGrid) -> Result<Self> {
        let (x, y) = rail.start_point(grid);
        Ok(Self::new(x, y, rail_slope(rail, grid)?, 1.0))
    }

    pub fn x_at_row(&self, y: f64) -> f64 {
        self.x_start + (y - self.y_start).abs() / self.theta.tan()
    }
}

/// Anchor plus per-row horizontal offsets and predicted valid range.
#[derive(Debug, Clone, PartialEq)]
pub struct RailProposal {
    pub anchor: AnchorLine,
    pub delta_x: Vec<f64>,
    pub start_index: usize,
    pub length: usize,
    pub score: f64,
}

/// Converts a free-form polyline into the fixed-row representation.
///
/// Points are sorted by y; x is linearly interpolated at every grid row inside
/// the polyline's y-span. Rows whose interpolated x falls outside `[0, W]` are
/// dropped, keeping the bottom-most contiguous run.
pub fn resample_polyline(raw_points: &[(f64, f64)], grid: &ImageGrid) -> Result<RailAnnotation> {
    if raw_points.len() < 2 {
        return Err(Error::InvalidAnnotation(
            "polyline needs at least 2 points".into(),
        ));
    }
    let mut pts: Vec<(f64, f64)> = raw_points.to_vec();
    if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidAnnotation("non-finite polyline point".into()));
    }
    pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    if pts.windows(2).any(|w| w[1].1 <= w[0].1) {
        return Err(Error::InvalidAnnotation(
            "polyline y-coordinates must be strictly monotonic".into(),
        ));
    }
    let (y_min, y_max) = (pts[0].1, pts[pts.len() - 1].1);

    let mut xs = vec![0.0; grid.n_rows];
    let mut inside = vec![false; grid.n_rows];
    let mut seg = 0;
    for i in 0..grid.n_rows {
        let y = grid.row_y(i);
        if y < y_min || y > y_max {
            continue;
        }
        while seg + 2 < pts.len() && pts[seg + 1].1 < y {
            seg += 1;
        }
        let (x0, y0) = pts[seg];
        let (x1, y1) = pts[seg + 1];
        let t = (y - y0) / (y1 - y0);
        let x = x0 + t * (x1 - x0);
        xs[i] = x;
        inside[i] = (0.0..=grid.width()).contains(&x);
    }

    let Some(end) = (0..grid.n_rows).rev().find(|&i| inside[i]) else {
        return Err(Error::InvalidAnnotation(
            "polyline covers no grid row inside the image".into(),
        ));
    };
    let mut start = end;
    while start > 0 && inside[start - 1] {
        start -= 1;
    }
    let length = end - start + 1;
    if length < 2 {
        return Err(Error::InvalidAnnotation(format!(
            "polyline covers {length} grid row(s), need 2"
        )));
    }
    for (i, x) in xs.iter_mut().enumerate() {
        if i < start || i > end {
            *x = 0.0;
        }
    }
    RailAnnotation::new(xs, start, length)
}

/// Mean angle of the chords from the starting point to every other valid point.
pub fn rail_slope(rail: &RailAnnotation, grid: &ImageGrid) -> Result<f64> {
    if rail.length < 2 {
        return Err(Error::InvalidAnnotation(
            "slope needs at least 2 valid points".into(),
        ));
    }
    let (xs, ys) = rail.start_point(grid);
    let e = rail.end_index();
    let sum: f64 = (rail.start_index..e)
        .map(|i| (grid.row_y(i) - ys).abs().atan2(rail.xs[i] - xs))
        .sum();
    Ok(sum / (rail.length - 1) as f64)
}

pub fn anchor_x_at_row(anchor: &AnchorLine, y: f64) -> f64 {
    anchor.x_at_row(y)
}

/// Horizontal offsets that make `anchor` reproduce `rail` on its valid rows.
pub fn encode_delta_x(anchor: &AnchorLine, rail: &RailAnnotation, grid: &ImageGrid) -> Vec<f64> {
    let mut delta = vec![0.0; grid.n_rows];
    for i in rail.valid_rows() {
        delta[i] = rail.xs[i] - anchor.x_at_row(grid.row_y(i));
    }
    delta
}

/// Turns a proposal into absolute x-coordinates on its predicted range.
///
/// Decoded values are clipped to `[-0.5 W, 1.5 W]`.
pub fn decode_proposal(p: &RailProposal, grid: &ImageGrid) -> Result<RailAnnotation> {
    if p.delta_x.len() != grid.n_rows {
        return Err(Error::InvalidAnnotation(format!(
            "proposal has {} offsets, grid has {} rows",
            p.delta_x.len(),
            grid.n_rows
        )));
    }
    let (lo, hi) = (-0.5 * grid.width(), 1.5 * grid.width());
    let mut xs = vec![0.0; grid.n_rows];
    for i in p.start_index..p.start_index + p.length {
        let x = p.anchor.x_at_row(grid.row_y(i)) + p.delta_x[i];
        xs[i] = x.clamp(lo, hi);
    }
    RailAnnotation::new(xs, p.start_index, p.length)
}

/// `n_samples` points spaced uniformly in y from the anchor start up to row 0.
pub fn sample_anchor_points(anchor: &AnchorLine, n_samples: usize) -> Vec<(f64, f64)> {
    assert!(n_samples >= 2, "need at least two anchor samples");
    let step = anchor.y_start / (n_samples - 1) as f64;
    (0..n_samples)
        .map(|k| {
            let y = if k == n_samples - 1 {
                0.0
            } else {
                anchor.y_start - step * k as f64
            };
            (anchor.x_at_row(y), y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn grid() -> ImageGrid {
        ImageGrid::new(800, 320, 72).unwrap()
    }

    fn straight_rail(grid: &ImageGrid, s: usize, l: usize, x_bottom: f64, dx_per_dy: f64) -> RailAnnotation {
        let e = s + l - 1;
        let mut xs = vec![0.0; grid.n_rows];
        for i in s..=e {
            xs[i] = x_bottom + dx_per_dy * (grid.row_y(e) - grid.row_y(i));
        }
        RailAnnotation::new(xs, s, l).unwrap()
    }

    // independent per-row scan over every segment
    fn brute_force_resample(pts: &[(f64, f64)], grid: &ImageGrid) -> Vec<Option<f64>> {
        (0..grid.n_rows)
            .map(|i| {
                let y = grid.row_y(i);
                for w in pts.windows(2) {
                    let (a, b) = (w[0], w[1]);
                    let (lo, hi) = (a.1.min(b.1), a.1.max(b.1));
                    if y >= lo && y <= hi {
                        return Some(a.0 + (b.0 - a.0) * (y - a.1) / (b.1 - a.1));
                    }
                }
                None
            })
            .collect()
    }

    #[test]
    fn row_y_endpoints() {
        let g = grid();
        assert_eq!(g.row_y(0), 0.0);
        assert_eq!(g.row_y(71), 320.0);
        assert!(g.row_ys().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn grid_rejects_single_row() {
        assert!(ImageGrid::new(10, 10, 1).is_err());
    }

    #[test]
    fn resample_vertical_segment() {
        let g = grid();
        let rail = resample_polyline(&[(100.0, 0.0), (100.0, 320.0)], &g).unwrap();
        assert_eq!(rail.start_index, 0);
        assert_eq!(rail.length, 72);
        assert!(rail.xs.iter().all(|&x| x == 100.0));
    }

    #[test]
    fn resample_diagonal_segment() {
        let g = grid();
        let rail = resample_polyline(&[(800.0, 320.0), (0.0, 0.0)], &g).unwrap();
        for i in 0..72 {
            assert_abs_diff_eq!(rail.xs[i], 800.0 * i as f64 / 71.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn resample_matches_brute_force() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.random_range(2..8);
            let mut ys: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..320.0)).collect();
            ys.sort_by(f64::total_cmp);
            ys.dedup();
            if ys.len() < 2 || ys[ys.len() - 1] - ys[0] < 20.0 {
                continue;
            }
            let pts: Vec<(f64, f64)> = ys.iter().map(|&y| (rng.random_range(50.0..750.0), y)).collect();
            let rail = resample_polyline(&pts, &g).unwrap();
            let oracle = brute_force_resample(&pts, &g);
            for i in 0..g.n_rows {
                let inside = rail.valid_rows().contains(&i);
                assert_eq!(inside, oracle[i].is_some(), "row {i}");
                if let Some(x) = oracle[i] {
                    assert_abs_diff_eq!(rail.xs[i], x, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn resample_rejects_short_or_degenerate() {
        let g = grid();
        assert!(resample_polyline(&[(1.0, 1.0)], &g).is_err());
        assert!(resample_polyline(&[(1.0, 5.0), (2.0, 5.0)], &g).is_err());
        // y-span [1, 3] covers no row (spacing ~4.5 px)
        assert!(resample_polyline(&[(1.0, 1.0), (2.0, 3.0)], &g).is_err());
    }

    #[test]
    fn resample_trims_off_image_rows() {
        let g = grid();
        // leaves the image to the left above y = 160
        let rail = resample_polyline(&[(-100.0, 0.0), (300.0, 320.0)], &g).unwrap();
        assert_eq!(rail.end_index(), 71);
        assert!(rail.points(&g).iter().all(|&(x, _)| x >= 0.0));
        rail.validate(&g).unwrap();
    }

    #[test]
    fn slope_vertical_rail() {
        let g = grid();
        let rail = straight_rail(&g, 10, 50, 400.0, 0.0);
        assert_abs_diff_eq!(rail_slope(&rail, &g).unwrap(), FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn slope_diagonals_match_direct_summation() {
        let g = grid();
        for (dx, expected) in [(-1.0, 3.0 * FRAC_PI_4), (1.0, FRAC_PI_4)] {
            let rail = straight_rail(&g, 0, 72, 400.0, dx);
            let (x0, y0) = rail.start_point(&g);
            let mut acc = 0.0;
            for i in 0..71 {
                acc += (g.row_y(i) - y0).abs().atan2(rail.xs[i] - x0);
            }
            let direct = acc / 71.0;
            let got = rail_slope(&rail, &g).unwrap();
            assert_abs_diff_eq!(got, direct, epsilon = 1e-12);
            assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn anchor_x_examples() {
        let a = AnchorLine::new(100.0, 300.0, FRAC_PI_2, 1.0);
        assert_abs_diff_eq!(a.x_at_row(0.0), 100.0, epsilon = 1e-12);
        let a = AnchorLine::new(100.0, 300.0, FRAC_PI_4, 1.0);
        assert_abs_diff_eq!(a.x_at_row(280.0), 120.0, epsilon = 1e-12);
        let a = AnchorLine::new(100.0, 300.0, 3.0 * FRAC_PI_4, 1.0);
        assert_abs_diff_eq!(a.x_at_row(280.0), 80.0, epsilon = 1e-12);
    }

    #[test]
    fn theta_is_clamped() {
        assert_eq!(AnchorLine::new(0.0, 0.0, 0.0, 1.0).theta, THETA_MIN);
        assert_eq!(AnchorLine::new(0.0, 0.0, PI, 1.0).theta, PI - THETA_MIN);
    }

    #[test]
    fn decode_straight_rail_with_zero_offsets() {
        let g = grid();
        let rail = straight_rail(&g, 5, 60, 300.0, 0.7);
        let anchor = AnchorLine::from_rail(&rail, &g).unwrap();
        let p = RailProposal {
            anchor,
            delta_x: vec![0.0; 72],
            start_index: rail.start_index,
            length: rail.length,
            score: 1.0,
        };
        let dec = decode_proposal(&p, &g).unwrap();
        for i in rail.valid_rows() {
            assert_abs_diff_eq!(dec.xs[i], rail.xs[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn decode_vertical_anchor_constant_offset() {
        let g = grid();
        let p = RailProposal {
            anchor: AnchorLine::new(250.0, 320.0, FRAC_PI_2, 1.0),
            delta_x: vec![3.5; 72],
            start_index: 0,
            length: 72,
            score: 1.0,
        };
        let dec = decode_proposal(&p, &g).unwrap();
        assert!(dec.xs.iter().all(|&x| (x - 253.5).abs() < 1e-12));
    }

    #[test]
    fn decode_clips_far_offsets() {
        let g = grid();
        let p = RailProposal {
            anchor: AnchorLine::new(250.0, 320.0, FRAC_PI_2, 1.0),
            delta_x: vec![1e6; 72],
            start_index: 0,
            length: 72,
            score: 1.0,
        };
        let dec = decode_proposal(&p, &g).unwrap();
        assert!(dec.xs.iter().all(|&x| x == 1200.0));
    }

    #[test]
    fn sample_points_endpoints_and_progression() {
        let a = AnchorLine::new(400.0, 300.0, FRAC_PI_4, 1.0);
        let two = sample_anchor_points(&a, 2);
        assert_eq!(two[0], (400.0, 300.0));
        assert_abs_diff_eq!(two[1].0, 700.0, epsilon = 1e-9);
        assert_eq!(two[1].1, 0.0);

        let pts = sample_anchor_points(&a, 36);
        let diffs: Vec<f64> = pts.windows(2).map(|w| w[1].0 - w[0].0).collect();
        for d in &diffs {
            assert_abs_diff_eq!(*d, diffs[0], epsilon = 1e-9);
        }

        let v = AnchorLine::new(123.0, 300.0, FRAC_PI_2, 1.0);
        assert!(sample_anchor_points(&v, 36).iter().all(|p| (p.0 - 123.0).abs() < 1e-12));
    }

    fn arb_rail() -> impl Strategy<Value = RailAnnotation> {
        (0usize..40, 2usize..32, prop::collection::vec(0.0f64..800.0, 72)).prop_map(|(s, l, xs)| {
            let mut xs = xs;
            for (i, x) in xs.iter_mut().enumerate() {
                if i < s || i >= s + l {
                    *x = 0.0;
                }
            }
            RailAnnotation::new(xs, s, l).unwrap()
        })
    }

    proptest! {
        #[test]
        fn slope_mirror_symmetry(rail in arb_rail()) {
            let g = grid();
            let a = rail_slope(&rail, &g).unwrap();
            let b = rail_slope(&rail.mirrored(&g), &g).unwrap();
            prop_assert!((b - (PI - a)).abs() < 1e-12);
            prop_assert!(a > 0.0 && a < PI);
        }

        #[test]
        fn delta_roundtrip(rail in arb_rail(), theta in 0.1f64..3.0) {
            let g = grid();
            let (x0, y0) = rail.start_point(&g);
            let anchor = AnchorLine::new(x0 + 7.0, y0, theta, 1.0);
            let p = RailProposal {
                anchor,
                delta_x: encode_delta_x(&anchor, &rail, &g),
                start_index: rail.start_index,
                length: rail.length,
                score: 1.0,
            };
            let dec = decode_proposal(&p, &g).unwrap();
            for i in rail.valid_rows() {
                prop_assert!((dec.xs[i] - rail.xs[i]).abs() <= 1e-9);
            }
        }

        #[test]
        fn straight_rails_decode_exactly(s in 0usize..30, l in 2usize..42, x in 100.0f64..700.0, k in -1.5f64..1.5) {
            let g = grid();
            let rail = straight_rail(&g, s, l, x, k);
            let anchor = AnchorLine::from_rail(&rail, &g).unwrap();
            let p = RailProposal { anchor, delta_x: vec![0.0; 72], start_index: s, length: l, score: 1.0 };
            let dec = decode_proposal(&p, &g).unwrap();
            for i in rail.valid_rows() {
                prop_assert!((dec.xs[i] - rail.xs[i]).abs() <= 1e-9);
            }
        }

        #[test]
        fn anchor_x_monotone_above_start(x in 0.0f64..800.0, y0 in 10.0f64..320.0, theta in 0.02f64..3.12) {
            let a = AnchorLine::new(x, y0, theta, 1.0);
            let ys: Vec<f64> = (0..20).map(|k| y0 * k as f64 / 19.0).collect();
            let xs: Vec<f64> = ys.iter().map(|&y| a.x_at_row(y)).collect();
            let inc = xs.windows(2).all(|w| w[1] >= w[0] - 1e-9);
            let dec = xs.windows(2).all(|w| w[1] <= w[0] + 1e-9);
            prop_assert!(inc || dec);
        }
    }
}
