//! Multi-scale feature extraction: a small strided conv backbone, a pyramid
//! pooling module on the coarsest stage, and a top-down feature pyramid.

use candle_core::Tensor;

use super::layers::{adaptive_pool_weights, apply_spatial, kron_weights, linear_resize_weights, upsample2x, Conv2d, ParamStore};
use crate::error::Result;

/// Stage outputs at strides 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub c3: Tensor,
    pub c4: Tensor,
    pub c5: Tensor,
}

struct Stage {
    down: Conv2d,
    refine: Conv2d,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.down.forward(x)?.relu()?;
        Ok(self.refine.forward(&x)?.relu()?)
    }
}

/// Stride-2 stem followed by four stages, each halving the resolution.
///
/// Stage widths come from the config; stages 2..4 feed the pyramid.
pub struct Backbone {
    stem: Conv2d,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, widths: &[usize; 4]) -> Result<Self> {
        let stem = Conv2d::new(ps, "backbone.stem", 3, widths[0], 3, 2)?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            stages.push(Stage {
                down: Conv2d::new(ps, &format!("backbone.stage{}.down", i + 1), c_in, w, 3, 2)?,
                refine: Conv2d::new(ps, &format!("backbone.stage{}.refine", i + 1), w, w, 3, 1)?,
            });
            c_in = w;
        }
        Ok(Self { stem, stages })
    }

    pub fn forward(&self, image: &Tensor) -> Result<StageFeatures> {
        let mut x = self.stem.forward(image)?.relu()?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(&x)?;
            outs.push(x.clone());
        }
        let c5 = outs.pop().expect("four stages");
        let c4 = outs.pop().expect("four stages");
        let c3 = outs.pop().expect("four stages");
        Ok(StageFeatures { c3, c4, c5 })
    }
}

/// Pyramid pooling: pool to `b x b` for each bin, project to `c / 4`
/// channels, resize back, concatenate with the input and fuse.
pub struct Ppm {
    bins: Vec<usize>,
    projections: Vec<Conv2d>,
    fuse: Conv2d,
}

impl Ppm {
    pub fn new(ps: &mut ParamStore, channels: usize, bins: &[usize]) -> Result<Self> {
        let branch = channels / 4;
        let projections = bins
            .iter()
            .map(|b| Conv2d::new(ps, &format!("ppm.bin{b}"), channels, branch, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv2d::new(ps, "ppm.fuse", channels + branch * bins.len(), channels, 3, 1)?;
        Ok(Self {
            bins: bins.to_vec(),
            projections,
            fuse,
        })
    }

    /// Pooled-and-projected, then resized, branch for one bin (before concat).
    pub fn branch(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let b = self.bins[index];
        let dev = x.device();
        let (pool, po, pi) = kron_weights(&adaptive_pool_weights(h, b), &adaptive_pool_weights(w, b));
        let pool = Tensor::from_vec(pool, (po, pi), dev)?.to_dtype(x.dtype())?;
        let pooled = apply_spatial(&x.reshape((n, c, h * w))?, &pool)?.reshape((n, c, b, b))?;
        let projected = self.projections[index].forward(&pooled)?.relu()?;
        let (up, uo, ui) = kron_weights(&linear_resize_weights(b, h), &linear_resize_weights(b, w));
        let up = Tensor::from_vec(up, (uo, ui), dev)?.to_dtype(x.dtype())?;
        let c_b = projected.dim(1)?;
        Ok(apply_spatial(&projected.reshape((n, c_b, b * b))?, &up)?.reshape((n, c_b, h, w))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut parts = vec![x.clone()];
        for i in 0..self.bins.len() {
            parts.push(self.branch(x, i)?);
        }
        let cat = Tensor::cat(&parts, 1)?;
        Ok(self.fuse.forward(&cat)?.relu()?)
    }
}

/// Pyramid levels P3..P5, all with the same channel count.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub p3: Tensor,
    pub p4: Tensor,
    pub p5: Tensor,
}

/// Top-down pathway with 1x1 laterals and 3x3 output smoothing.
///
/// P5 is the lateral projection of the context-enriched C5; only P3 and P4
/// are smoothed since those are the levels the heads consume.
pub struct Fpn {
    lat3: Conv2d,
    lat4: Conv2d,
    lat5: Conv2d,
    smooth3: Conv2d,
    smooth4: Conv2d,
}

impl Fpn {
    pub fn new(ps: &mut ParamStore, in_channels: [usize; 3], channels: usize) -> Result<Self> {
        Ok(Self {
            lat3: Conv2d::new(ps, "fpn.lateral3", in_channels[0], channels, 1, 1)?,
            lat4: Conv2d::new(ps, "fpn.lateral4", in_channels[1], channels, 1, 1)?,
            lat5: Conv2d::new(ps, "fpn.lateral5", in_channels[2], channels, 1, 1)?,
            smooth3: Conv2d::new(ps, "fpn.smooth3", channels, channels, 3, 1)?,
            smooth4: Conv2d::new(ps, "fpn.smooth4", channels, channels, 3, 1)?,
        })
    }

    pub fn forward(&self, c3: &Tensor, c4: &Tensor, c5: &Tensor) -> Result<PyramidFeatures> {
        let p5 = self.lat5.forward(c5)?;
        let m4 = (self.lat4.forward(c4)? + upsample2x(&p5)?)?;
        let m3 = (self.lat3.forward(c3)? + upsample2x(&m4)?)?;
        Ok(PyramidFeatures {
            p3: self.smooth3.forward(&m3)?,
            p4: self.smooth4.forward(&m4)?,
            p5,
        })
    }
}
