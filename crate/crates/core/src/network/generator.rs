//! Dynamic anchor line generator: three parallel branches on P4 predicting
//! the start heatmap, the sub-cell start offset and the anchor slope.

use std::f64::consts::PI;

use candle_core::Tensor;
use candle_nn::ops::sigmoid;

use super::layers::{Conv2d, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// `(N, 1, H4, W4)` start probabilities in `(0, 1)`.
    pub heatmap: Tensor,
    /// `(N, 2, H4, W4)` start offsets in stride units, `[x, y]` channels.
    pub offsets: Tensor,
    /// `(N, 1, H4, W4)` anchor angles in `(0, pi)`.
    pub slopes: Tensor,
}

struct Branch {
    hidden: Conv2d,
    out: Conv2d,
}

impl Branch {
    fn new(ps: &mut ParamStore, name: &str, c: usize, hidden: usize, out: usize, out_bias: f64) -> Result<Self> {
        Ok(Self {
            hidden: Conv2d::new(ps, &format!("{name}.hidden"), c, hidden, 3, 1)?,
            out: Conv2d::with_init(ps, &format!("{name}.out"), hidden, out, 1, 1, 0.01, out_bias)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.relu()?)
    }
}

pub struct Generator {
    heat: Branch,
    offset: Branch,
    slope: Branch,
}

impl Generator {
    pub fn new(ps: &mut ParamStore, channels: usize, hidden: usize, heat_bias: f64) -> Result<Self> {
        Ok(Self {
            heat: Branch::new(ps, "generator.heat", channels, hidden, 1, heat_bias)?,
            offset: Branch::new(ps, "generator.offset", channels, hidden, 2, 0.0)?,
            slope: Branch::new(ps, "generator.slope", channels, hidden, 1, 0.0)?,
        })
    }

    pub fn forward(&self, p4: &Tensor) -> Result<GeneratorOutput> {
        let heatmap = sigmoid(&self.heat.forward(p4)?)?;
        let offsets = self.offset.forward(p4)?;
        let slopes = sigmoid(&self.slope.forward(p4)?)?.affine(PI, 0.0)?;
        Ok(GeneratorOutput {
            heatmap,
            offsets,
            slopes,
        })
    }
}
