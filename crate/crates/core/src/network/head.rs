//! Anchor-referenced detection head: bilinear RoI features along each anchor
//! line on P3, then one fully connected layer predicting per-row horizontal
//! offsets and the normalised `(s, l)` range.

use candle_core::{Tensor, D};

use super::layers::{Linear, ParamStore};
use crate::error::Result;
use crate::geometry::{sample_anchor_points, AnchorLine};

/// Stride of P3 relative to the input image.
pub const P3_STRIDE: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `(M, n_rows)` offsets in input pixels.
    pub delta_x: Tensor,
    /// `(M, 2)` start index and length as fractions of `n_rows`.
    pub range: Tensor,
    /// Number of proposals contributed by each image, in batch order.
    pub counts: Vec<usize>,
}

/// Bilinear weights of `points` (pixels) on a `height x width` map of the
/// given stride, as a dense `(points, height * width)` row-major matrix.
/// Corners outside the map contribute nothing.
pub fn bilinear_weights(points: &[(f64, f64)], stride: f64, height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; points.len() * height * width];
    for (k, &(x, y)) in points.iter().enumerate() {
        let (u, v) = (x / stride, y / stride);
        if !(u.is_finite() && v.is_finite()) {
            continue;
        }
        let (u0, v0) = (u.floor(), v.floor());
        let (fu, fv) = (u - u0, v - v0);
        let row = &mut out[k * height * width..(k + 1) * height * width];
        for (dv, wv) in [(0.0, 1.0 - fv), (1.0, fv)] {
            for (du, wu) in [(0.0, 1.0 - fu), (1.0, fu)] {
                let (cu, cv) = (u0 + du, v0 + dv);
                let w = wu * wv;
                if w == 0.0 || cu < 0.0 || cv < 0.0 || cu >= width as f64 || cv >= height as f64 {
                    continue;
                }
                row[cv as usize * width + cu as usize] += w;
            }
        }
    }
    out
}

pub struct DetectionHead {
    fc: Linear,
    n_samples: usize,
    n_rows: usize,
}

impl DetectionHead {
    pub fn new(ps: &mut ParamStore, channels: usize, n_samples: usize, n_rows: usize) -> Result<Self> {
        // ranges start at "every row" (s = 0, l = 1) rather than at an empty
        // rail, so the optimiser only has to shorten them
        let mut bias = vec![0.0; n_rows + 2];
        bias[n_rows + 1] = 1.0;
        Ok(Self {
            fc: Linear::with_bias(ps, "head.fc", n_samples * channels, bias, 1e-3)?,
            n_samples,
            n_rows,
        })
    }

    pub fn n_outputs(&self) -> usize {
        self.n_rows + 2
    }

    /// RoI features `(A, n_samples * C)` for the anchors of one image.
    ///
    /// `p3` is `(C, H3, W3)`. Sample positions are constants of the graph.
    pub fn roi_features(&self, p3: &Tensor, anchors: &[AnchorLine]) -> Result<Tensor> {
        let (c, h, w) = p3.dims3()?;
        let points: Vec<(f64, f64)> = anchors.iter().flat_map(|a| sample_anchor_points(a, self.n_samples)).collect();
        let weights = bilinear_weights(&points, P3_STRIDE, h, w);
        let weights = Tensor::from_vec(weights, (points.len(), h * w), p3.device())?.to_dtype(p3.dtype())?;
        let sampled = weights.matmul(&p3.reshape((c, h * w))?.t()?)?;
        Ok(sampled.reshape((anchors.len(), self.n_samples * c))?)
    }

    /// Runs the head over a batch; `anchors[b]` belongs to image `b`.
    pub fn forward(&self, p3: &Tensor, anchors: &[Vec<AnchorLine>]) -> Result<HeadOutput> {
        let mut feats = Vec::new();
        let mut counts = Vec::with_capacity(anchors.len());
        for (b, image_anchors) in anchors.iter().enumerate() {
            counts.push(image_anchors.len());
            if !image_anchors.is_empty() {
                feats.push(self.roi_features(&p3.get(b)?, image_anchors)?);
            }
        }
        if feats.is_empty() {
            let empty = Tensor::zeros((0, self.n_rows + 2), p3.dtype(), p3.device())?;
            return Ok(HeadOutput {
                delta_x: empty.narrow(D::Minus1, 0, self.n_rows)?,
                range: empty.narrow(D::Minus1, self.n_rows, 2)?,
                counts,
            });
        }
        let out = self.fc.forward(&Tensor::cat(&feats, 0)?)?;
        Ok(HeadOutput {
            delta_x: out.narrow(D::Minus1, 0, self.n_rows)?,
            range: out.narrow(D::Minus1, self.n_rows, 2)?,
            counts,
        })
    }
}
