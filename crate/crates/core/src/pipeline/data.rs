//! Loading annotated images and turning them into network batches.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};
use crate::geometry::{ImageGrid, RailAnnotation};
use crate::synth::{read_dataset, DatasetRecord, Preprocess};

const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];

/// One preprocessed training image with its rails on the network grid.
#[derive(Debug, Clone)]
pub struct Sample {
    pub raw_file: String,
    pub image: RgbImage,
    pub rails: Vec<RailAnnotation>,
    pub src_size: (usize, usize),
}

/// Directory that `raw_file` entries of `annotation` are relative to.
pub fn data_root(annotation: &Path) -> PathBuf {
    annotation.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// Runs `f` over `items` on up to `workers` threads; output order follows input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<U>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Reads an annotation file and preprocesses every image and its lanes.
pub fn load_samples(annotation: &Path, pre: &Preprocess, grid: &ImageGrid, workers: usize) -> Result<Vec<Sample>> {
    let records = read_dataset(annotation)?;
    let root = data_root(annotation);
    par_map(&records, workers, |r| prepare_record(r, &root, pre, grid)).into_iter().collect()
}

fn prepare_record(r: &DatasetRecord, root: &Path, pre: &Preprocess, grid: &ImageGrid) -> Result<Sample> {
    let raw = load_image(&root.join(&r.raw_file))?;
    let (w, h) = (raw.width() as usize, raw.height() as usize);
    let lanes: Vec<Vec<(f64, f64)>> = (0..r.lanes.len()).map(|k| r.lane_points(k)).collect();
    let rails = pre.apply_lanes(&lanes, w, h, grid);
    if rails.len() != lanes.len() {
        log::warn!("{}: {} of {} lanes fall outside the network view", r.raw_file, lanes.len() - rails.len(), lanes.len());
    }
    Ok(Sample {
        raw_file: r.raw_file.clone(),
        image: pre.apply_image(&raw),
        rails,
        src_size: (w, h),
    })
}

/// Normalised `(N, 3, H, W)` batch.
pub fn batch_tensor(images: &[&RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Config("empty image batch".into()));
    };
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(Error::Config("images in a batch must share one size".into()));
        }
        let raw = img.as_raw();
        for c in 0..3 {
            data.extend(raw.chunks_exact(3).map(|px| (px[c] as f32 / 255.0 - MEAN[c]) / STD[c]));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn batch_layout_is_channel_major() {
        let mut img = RgbImage::new(4, 2);
        img.put_pixel(3, 1, Rgb([255, 0, 128]));
        let t = batch_tensor(&[&img, &img], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 2, 4]);
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        let at = |b: usize, c: usize, y: usize, x: usize| v[((b * 3 + c) * 2 + y) * 4 + x];
        assert!((at(1, 0, 1, 3) - (1.0 - MEAN[0]) / STD[0]).abs() < 1e-6);
        assert!((at(1, 1, 1, 3) - (0.0 - MEAN[1]) / STD[1]).abs() < 1e-6);
        assert!((at(0, 2, 0, 0) - (0.0 - MEAN[2]) / STD[2]).abs() < 1e-6);
    }

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<usize> = (0..37).collect();
        for w in [1, 2, 5, 64] {
            assert_eq!(par_map(&xs, w, |x| x * 2), xs.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
    }
}
