//! The trainable model: backbone, pyramid pooling, feature pyramid, anchor
//! line generator and detection head, plus the training and inference wiring.
//!
//! During training the head is fed anchors built from the ground-truth
//! starts and slopes (one per rail), so proposal/target matching is
//! one-to-one and the head's losses do not depend on generator parameters.
//! At inference the anchors come from heatmap peaks.

pub mod backbone;
pub mod checkpoint;
pub mod generator;
pub mod head;
pub mod layers;

pub use candle_core::{DType, Device};
use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sample_anchor_points, AnchorLine, ImageGrid, RailAnnotation, RailProposal};
use crate::label_codec::{build_anchor, extract_peaks, Map2, TargetMaps, DEFAULT_STRIDE};
use crate::losses::{focal_heatmap_loss, line_iou_loss, offset_loss, range_loss, slope_loss, LossParts, LossWeights};
use backbone::{Backbone, Fpn, Ppm, PyramidFeatures};
use generator::{Generator, GeneratorOutput};
use head::{DetectionHead, HeadOutput};
use layers::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub backbone_channels: [usize; 4],
    pub fpn_channels: usize,
    pub generator_hidden: usize,
    pub n_samples: usize,
    pub n_rows: usize,
    pub ppm_bins: Vec<usize>,
    /// Initial bias of the heatmap logit (sigmoid(-2.19) ~ 0.1).
    pub heat_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_height: 320,
            input_width: 800,
            backbone_channels: [16, 32, 64, 64],
            fpn_channels: 64,
            generator_hidden: 64,
            n_samples: 36,
            n_rows: 72,
            ppm_bins: vec![1, 2, 3, 6],
            heat_bias: -2.19,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 || self.input_height % 32 != 0 || self.input_width % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {}x{} must be nonzero multiples of 32",
                self.input_width, self.input_height
            )));
        }
        if self.n_samples < 2 || self.n_rows < 2 {
            return Err(Error::Config("n_samples and n_rows must be >= 2".into()));
        }
        if self.ppm_bins.is_empty() || self.ppm_bins[0] == 0 || self.ppm_bins.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("ppm_bins must be nonempty, positive and ascending".into()));
        }
        if self.fpn_channels == 0 || self.fpn_channels % 4 != 0 {
            return Err(Error::Config("fpn_channels must be a positive multiple of 4".into()));
        }
        if self.backbone_channels.contains(&0) || self.generator_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> ImageGrid {
        ImageGrid {
            width_px: self.input_width,
            height_px: self.input_height,
            n_rows: self.n_rows,
        }
    }

    /// Generator map size `(W4, H4)`.
    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.input_width / DEFAULT_STRIDE, self.input_height / DEFAULT_STRIDE)
    }
}

/// Converts regressed range fractions into a row range.
pub fn decode_range(s_frac: f64, l_frac: f64, n_rows: usize) -> (usize, usize) {
    let n = n_rows as f64;
    let s = if s_frac.is_finite() { (s_frac * n).round().clamp(0.0, n - 2.0) } else { 0.0 } as usize;
    let max_len = (n_rows - s) as f64;
    let l = if l_frac.is_finite() { (l_frac * n).round().clamp(2.0, max_len) } else { max_len } as usize;
    (s, l)
}

/// Generator predictions of one image as plain maps.
pub struct GeneratorMaps {
    pub heatmap: Map2<f64>,
    pub offsets: Map2<[f64; 2]>,
    pub slopes: Map2<f64>,
}

impl GeneratorOutput {
    pub fn maps(&self, b: usize) -> Result<GeneratorMaps> {
        let heat = self.heatmap.get(b)?.get(0)?.to_dtype(DType::F64)?;
        let (h, w) = heat.dims2()?;
        let heat = heat.flatten_all()?.to_vec1::<f64>()?;
        let off = self.offsets.get(b)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let slopes = self.slopes.get(b)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let offsets = (0..h * w).map(|i| [off[i], off[h * w + i]]).collect();
        Ok(GeneratorMaps {
            heatmap: Map2::from_vec(w, h, heat),
            offsets: Map2::from_vec(w, h, offsets),
            slopes: Map2::from_vec(w, h, slopes),
        })
    }
}

/// Target maps of a batch as `(N, C, H4, W4)` tensors.
pub struct BatchTargets {
    pub heatmap: Tensor,
    pub offsets: Tensor,
    pub slopes: Tensor,
    pub valid: Tensor,
    pub n_rails: Vec<usize>,
    pub radius: usize,
}

impl BatchTargets {
    pub fn new(targets: &[TargetMaps], dtype: DType, device: &Device) -> Result<Self> {
        let first = targets.first().ok_or_else(|| Error::Config("empty batch".into()))?;
        let (w, h) = (first.heatmap.width, first.heatmap.height);
        let n = targets.len();
        let mut heat = Vec::with_capacity(n * h * w);
        let mut off = Vec::with_capacity(2 * n * h * w);
        let mut slopes = Vec::with_capacity(n * h * w);
        let mut valid = Vec::with_capacity(n * h * w);
        for t in targets {
            if (t.heatmap.width, t.heatmap.height) != (w, h) || t.radius != first.radius {
                return Err(Error::Config("inconsistent target maps in batch".into()));
            }
            heat.extend_from_slice(&t.heatmap.data);
            off.extend(t.offsets.data.iter().map(|o| o[0]));
            off.extend(t.offsets.data.iter().map(|o| o[1]));
            slopes.extend_from_slice(&t.slopes.data);
            valid.extend(t.valid_mask.data.iter().map(|&v| v as u8 as f64));
        }
        let mk = |data: Vec<f64>, c: usize| -> Result<Tensor> { Ok(Tensor::from_vec(data, (n, c, h, w), device)?.to_dtype(dtype)?) };
        Ok(Self {
            heatmap: mk(heat, 1)?,
            offsets: mk(off, 2)?,
            slopes: mk(slopes, 1)?,
            valid: mk(valid, 1)?,
            n_rails: targets.iter().map(|t| t.n_rails()).collect(),
            radius: first.radius,
        })
    }
}

pub struct DalNet {
    cfg: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    ppm: Ppm,
    fpn: Fpn,
    generator: Generator,
    head: DetectionHead,
}

impl DalNet {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed, dtype, device.clone());
        let widths = cfg.backbone_channels;
        let backbone = Backbone::new(&mut ps, &widths)?;
        let ppm = Ppm::new(&mut ps, widths[3], &cfg.ppm_bins)?;
        let fpn = Fpn::new(&mut ps, [widths[1], widths[2], widths[3]], cfg.fpn_channels)?;
        let generator = Generator::new(&mut ps, cfg.fpn_channels, cfg.generator_hidden, cfg.heat_bias)?;
        let head = DetectionHead::new(&mut ps, cfg.fpn_channels, cfg.n_samples, cfg.n_rows)?;
        Ok(Self {
            cfg,
            params: ps,
            backbone,
            ppm,
            fpn,
            generator,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn ppm(&self) -> &Ppm {
        &self.ppm
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn head(&self) -> &DetectionHead {
        &self.head
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("input batch must be (N, 3, H, W) with H, W multiples of 32, got {:?}", images.dims())));
        }
        Ok(())
    }

    pub fn features(&self, images: &Tensor) -> Result<PyramidFeatures> {
        self.check_input(images)?;
        let stages = self.backbone.forward(images)?;
        let c5 = self.ppm.forward(&stages.c5)?;
        self.fpn.forward(&stages.c3, &stages.c4, &c5)
    }

    /// Loss terms for a batch, with anchors built from the ground truth.
    ///
    /// `rails[b]` must be the rail list `targets[b]` was encoded from. With
    /// `jitter`, training anchors are perturbed as described by
    /// [`AnchorJitter`].
    pub fn forward_train<R: Rng>(
        &self,
        images: &Tensor,
        targets: &[TargetMaps],
        rails: &[Vec<RailAnnotation>],
        weights: &LossWeights,
        jitter: Option<(&mut R, AnchorJitter)>,
    ) -> Result<LossParts> {
        let feats = self.features(images)?;
        let gen = self.generator.forward(&feats.p4)?;
        let bt = BatchTargets::new(targets, self.dtype(), self.device())?;

        let heat = focal_heatmap_loss(&gen.heatmap, &bt.heatmap, &bt.n_rails, weights.alpha, weights.beta)?;
        let offset = offset_loss(&gen.offsets, &bt.offsets, &bt.valid, &bt.n_rails, bt.radius)?;
        let slope = slope_loss(&gen.slopes, &bt.slopes, &bt.valid, &bt.n_rails, bt.radius)?;

        let anchors = training_anchors(targets, jitter);
        let head_out = self.head.forward(&feats.p3, &anchors)?;
        let (range, line_iou) = self.head_losses(&head_out, &anchors, targets, rails, weights.liou_radius)?;
        Ok(LossParts {
            heat,
            offset,
            slope,
            range,
            line_iou,
        })
    }

    fn head_losses(
        &self,
        out: &HeadOutput,
        anchors: &[Vec<AnchorLine>],
        targets: &[TargetMaps],
        rails: &[Vec<RailAnnotation>],
        liou_radius: f64,
    ) -> Result<(Tensor, Tensor)> {
        let grid = self.cfg.grid();
        let n = grid.n_rows;
        let mut anchor_xs = Vec::new();
        let mut gt_xs = Vec::new();
        let mut valid = Vec::new();
        let mut gt_range = Vec::new();
        for (b, image_anchors) in anchors.iter().enumerate() {
            for (anchor, start) in image_anchors.iter().zip(&targets[b].starts) {
                let rail = &rails[b][start.rail_index];
                for i in 0..n {
                    anchor_xs.push(anchor.x_at_row(grid.row_y(i)));
                    let inside = rail.valid_rows().contains(&i);
                    gt_xs.push(if inside { rail.xs[i] } else { 0.0 });
                    valid.push(inside as u8 as f64);
                }
                gt_range.push(rail.start_index as f64 / n as f64);
                gt_range.push(rail.length as f64 / n as f64);
            }
        }
        let m = gt_range.len() / 2;
        let (dt, dev) = (self.dtype(), self.device());
        let mk = |d: Vec<f64>, c: usize| -> Result<Tensor> { Ok(Tensor::from_vec(d, (m, c), dev)?.to_dtype(dt)?) };
        let pred_xs = (mk(anchor_xs, n)? + &out.delta_x)?;
        let line_iou = line_iou_loss(&pred_xs, &mk(gt_xs, n)?, &mk(valid, n)?, liou_radius)?;
        let range = range_loss(&out.range, &mk(gt_range, 2)?)?;
        Ok((range, line_iou))
    }

    /// Raw generator output for a batch.
    pub fn generate(&self, images: &Tensor) -> Result<(PyramidFeatures, GeneratorOutput)> {
        let feats = self.features(images)?;
        let gen = self.generator.forward(&feats.p4)?;
        Ok((feats, gen))
    }

    /// Detections per image: heatmap peaks, anchors, then the head.
    /// Detections come out in descending score order.
    pub fn forward_infer(&self, images: &Tensor, k_max: usize, threshold: f64) -> Result<Vec<Vec<Detection>>> {
        let (feats, gen) = self.generate(images)?;
        let grid = self.cfg.grid();
        let n_images = images.dim(0)?;
        let mut anchors = Vec::with_capacity(n_images);
        let mut cells = Vec::with_capacity(n_images);
        for b in 0..n_images {
            let maps = gen.maps(b)?;
            let peaks = extract_peaks(&maps.heatmap, k_max, threshold);
            let (a, c): (Vec<AnchorLine>, Vec<(usize, usize)>) = peaks
                .iter()
                .filter_map(|p| build_anchor(p, &maps.offsets, &maps.slopes, DEFAULT_STRIDE).map(|a| (a, (p.col, p.row))))
                .unzip();
            anchors.push(a);
            cells.push(c);
        }
        let out = self.head.forward(&feats.p3, &anchors)?;
        let delta = out.delta_x.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let range = out.range.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut k = 0;
        let mut proposals = Vec::with_capacity(n_images);
        for (image_anchors, image_cells) in anchors.iter().zip(&cells) {
            let mut props = Vec::with_capacity(image_anchors.len());
            for (anchor, &cell) in image_anchors.iter().zip(image_cells) {
                let (s, l) = if anchor_outside(anchor, self.cfg.n_samples, &grid) {
                    (0, 0)
                } else {
                    decode_range(range[k][0], range[k][1], grid.n_rows)
                };
                props.push(Detection {
                    proposal: RailProposal {
                        anchor: *anchor,
                        delta_x: delta[k].clone(),
                        start_index: s,
                        length: l,
                        score: anchor.score,
                    },
                    cell,
                });
                k += 1;
            }
            proposals.push(props);
        }
        Ok(proposals)
    }
}

/// A proposal together with the heatmap cell `(col, row)` it was decoded from.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub proposal: RailProposal,
    pub cell: (usize, usize),
}

fn anchor_outside(anchor: &AnchorLine, n_samples: usize, grid: &ImageGrid) -> bool {
    sample_anchor_points(anchor, n_samples)
        .iter()
        .all(|&(x, y)| !(0.0..=grid.width()).contains(&x) || !(0.0..=grid.height()).contains(&y))
}

/// Uniform perturbation of teacher-forced anchors: the start moves by up
/// to `position_px` per axis and the angle by up to `slope_rad`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorJitter {
    pub position_px: f64,
    pub slope_rad: f64,
}

impl AnchorJitter {
    pub fn is_zero(&self) -> bool {
        self.position_px <= 0.0 && self.slope_rad <= 0.0
    }
}

/// One anchor per encoded rail, from its exact start and mean slope.
pub fn training_anchors<R: Rng>(targets: &[TargetMaps], mut jitter: Option<(&mut R, AnchorJitter)>) -> Vec<Vec<AnchorLine>> {
    targets
        .iter()
        .map(|t| {
            t.starts
                .iter()
                .map(|s| {
                    let (mut x, mut y) = s.point;
                    let mut theta = s.slope;
                    if let Some((rng, j)) = jitter.as_mut() {
                        if j.position_px > 0.0 {
                            x += rng.random_range(-j.position_px..=j.position_px);
                            y += rng.random_range(-j.position_px..=j.position_px);
                        }
                        if j.slope_rad > 0.0 {
                            theta += rng.random_range(-j.slope_rad..=j.slope_rad);
                        }
                    }
                    AnchorLine::new(x, y, theta, 1.0)
                })
                .collect()
        })
        .collect()
}
