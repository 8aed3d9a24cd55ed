//! Parameter storage and the handful of layers the model is built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named trainable parameters with seeded initialisation.
///
/// Names are kept sorted so iteration order, and therefore checkpoint layout
/// and optimiser state order, is deterministic.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn values(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        self.insert(name, data, shape)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn n_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Square `k x k` convolution with He-normal weights and zero bias.
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Self::with_init(ps, name, c_in, c_out, k, stride, std, 0.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        weight_std: f64,
        bias: f64,
    ) -> Result<Self> {
        let weight = ps.normal(&format!("{name}.weight"), &[c_out, c_in, k, k], weight_std)?;
        let bias = ps.constant(&format!("{name}.bias"), &[c_out], bias)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // candle sizes the stride-2 input gradient from the height alone, so
        // both spatial axes must share parity; model inputs are multiples of 32
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, weight_std: f64) -> Result<Self> {
        let weight = ps.normal(&format!("{name}.weight"), &[d_out, d_in], weight_std)?;
        let bias = ps.constant(&format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Self { weight, bias })
    }

    /// As [`Linear::new`] with an explicit initial bias of length `d_out`.
    pub fn with_bias(ps: &mut ParamStore, name: &str, d_in: usize, bias: Vec<f64>, weight_std: f64) -> Result<Self> {
        let d_out = bias.len();
        let weight = ps.normal(&format!("{name}.weight"), &[d_out, d_in], weight_std)?;
        let bias = ps.values(&format!("{name}.bias"), &[d_out], bias)?;
        Ok(Self { weight, bias })
    }

    /// `(M, d_in) -> (M, d_out)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Nearest-neighbour 2x upsampling of `(N, C, H, W)`.
///
/// Built from broadcast and reshape so the backward pass accumulates
/// gradients like any other op.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// Adaptive average pooling from `len` cells to `bins` cells (1-D weights,
/// `bins x len`), using the `floor(i len / b) .. ceil((i + 1) len / b)` windows.
pub fn adaptive_pool_weights(len: usize, bins: usize) -> Vec<Vec<f64>> {
    (0..bins)
        .map(|i| {
            let lo = i * len / bins;
            let hi = ((i + 1) * len).div_ceil(bins);
            let mut row = vec![0.0; len];
            for v in &mut row[lo..hi] {
                *v = 1.0 / (hi - lo) as f64;
            }
            row
        })
        .collect()
}

/// Linear interpolation from `src` cells to `dst` cells with half-pixel
/// centres (`dst x src`).
pub fn linear_resize_weights(src: usize, dst: usize) -> Vec<Vec<f64>> {
    (0..dst)
        .map(|j| {
            let mut row = vec![0.0; src];
            let pos = ((j as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let f = pos - i0 as f64;
            row[i0] += 1.0 - f;
            row[i1] += f;
            row
        })
        .collect()
}

/// Separable 2-D operator `(out_h * out_w) x (in_h * in_w)` from row and
/// column weight matrices.
pub fn kron_weights(rows: &[Vec<f64>], cols: &[Vec<f64>]) -> (Vec<f64>, usize, usize) {
    let (oh, ih) = (rows.len(), rows[0].len());
    let (ow, iw) = (cols.len(), cols[0].len());
    let mut out = vec![0.0; oh * ow * ih * iw];
    for a in 0..oh {
        for b in 0..ow {
            let r = (a * ow + b) * ih * iw;
            for i in 0..ih {
                let wr = rows[a][i];
                if wr == 0.0 {
                    continue;
                }
                for j in 0..iw {
                    out[r + i * iw + j] = wr * cols[b][j];
                }
            }
        }
    }
    (out, oh * ow, ih * iw)
}

/// Applies a `(out, in)` spatial operator to the flattened spatial axis of
/// `(N, C, in)`, returning `(N, C, out)`.
pub fn apply_spatial(x: &Tensor, op: &Tensor) -> Result<Tensor> {
    let (n, c, s) = x.dims3()?;
    Ok(x.reshape((n * c, s))?.matmul(&op.t()?)?.reshape((n, c, ()))?)
}
