//! Image/mask samples: PNG I/O, resizing, normalisation, augmentation,
//! split plans and a synthetic polyp-like generator.

mod augment;
mod split;
mod synth;

pub use augment::{augment, AugmentationConfig};
pub use split::{kfold_split, single_split, SplitMode, SplitPlan};
pub use synth::{synth_polyp_dataset, synth_sample};

use std::path::{Path, PathBuf};

use image::{ColorType, GrayImage, RgbImage};

use crate::error::{Error, Result};
pub use crate::metrics::Mask;
use crate::tensor::{Real, Tensor};

/// An RGB image with values in `[0, 255]` and its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[h, w, 3]`
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Mask) -> Result<Self> {
        let (h, w) = match image.shape() {
            &[h, w, 3] => (h, w),
            s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "expected an [h, w, 3] image".into(),
                })
            }
        };
        if (h, w) != (mask.height, mask.width) {
            return Err(Error::DimensionMismatch {
                image: (h, w),
                mask: (mask.height, mask.width),
            });
        }
        Ok(Sample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

/// Reads an 8-bit RGB PNG into `[h, w, 3]` values in `[0, 255]`.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    require(path)?;
    let img = image::open(path)?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::NotRgb {
            path: path.to_path_buf(),
            found: format!("{:?}", img.color()),
        });
    }
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    Tensor::new(
        [h as usize, w as usize, 3],
        rgb.into_raw().into_iter().map(f32::from).collect(),
    )
}

/// Reads a mask PNG (any colour type, via luma) and binarises at `> 127`.
pub fn load_mask(path: &Path) -> Result<Mask> {
    require(path)?;
    let luma = image::open(path)?.into_luma8();
    let (w, h) = luma.dimensions();
    Mask::new(
        h as usize,
        w as usize,
        luma.into_raw()
            .into_iter()
            .map(|v| (v > 127) as u8)
            .collect(),
    )
}

pub fn load_png_pair(image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let image = load_rgb(image_path)?;
    let mask = load_mask(mask_path)?;
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Sample::new(id, image, mask)
}

/// Writes `[h, w, 3]` values (clamped to `[0, 255]`, rounded) as an RGB PNG.
pub fn save_rgb<T: Real>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = match image.shape() {
        &[h, w, 3] => (h, w),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "expected an [h, w, 3] image".into(),
            })
        }
    };
    let raw = image
        .data()
        .iter()
        .map(|v| v.as_f64().round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    img.save(path)?;
    Ok(())
}

/// Writes a mask as an 8-bit grayscale PNG with values 0 and 255.
pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let raw = mask
        .data
        .iter()
        .map(|&v| if v != 0 { 255 } else { 0 })
        .collect();
    let img = GrayImage::from_raw(mask.width as u32, mask.height as u32, raw)
        .expect("buffer size matches");
    img.save(path)?;
    Ok(())
}

/// Loads every `images/<stem>.png` with its `masks/<stem>.png`, sorted by stem.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<Sample>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    if !images.is_dir() {
        return Err(Error::MissingFile(images));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&images)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset(format!(
            "no PNG images in {}",
            images.display()
        )));
    }
    paths
        .iter()
        .map(|p| load_png_pair(p, &masks.join(p.file_name().unwrap())))
        .collect()
}

/// Writes samples in the `images/` + `masks/` layout read by [`load_dataset_dir`].
pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    for s in samples {
        save_rgb(&s.image, &dir.join("images").join(format!("{}.png", s.id)))?;
        save_mask(&s.mask, &dir.join("masks").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

/// Source coordinate of output index `i` when resampling `n_in -> n_out`
/// with pixel centres aligned.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

/// Bilinear resize of an `[h, w, c]` image; edges clamp.
pub fn resize_bilinear(image: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = match image.shape() {
        &[h, w, c] => (h, w, c),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "expected [h, w, c]".into(),
            })
        }
    };
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = vec![0f32; height * width * c];
    for y in 0..height {
        let sy = source_coord(y, h, height).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..width {
            let sx = source_coord(x, w, width).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(y * width + x) * c + ch] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Tensor::new([height, width, c], out)
}

/// Nearest-neighbour resize; keeps the mask binary.
pub fn resize_nearest(mask: &Mask, height: usize, width: usize) -> Mask {
    if (mask.height, mask.width) == (height, width) {
        return mask.clone();
    }
    let pick = |i: usize, n_in: usize, n_out: usize| ((i * n_in) / n_out).min(n_in - 1);
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = pick(y, mask.height, height);
        for x in 0..width {
            data.push(mask.data[sy * mask.width + pick(x, mask.width, width)]);
        }
    }
    Mask {
        height,
        width,
        data,
    }
}

pub fn resize(sample: &Sample, height: usize, width: usize) -> Result<Sample> {
    Ok(Sample {
        id: sample.id.clone(),
        image: resize_bilinear(&sample.image, height, width)?,
        mask: resize_nearest(&sample.mask, height, width),
    })
}

const ZSCORE_EPS: f64 = 1e-6;

/// Per-channel `(x - μ) / max(σ, ε)` over one `[h, w, c]` image.
pub fn zscore_normalize(image: &Tensor<f32>) -> Tensor<f32> {
    let c = *image.shape().last().unwrap();
    let n = (image.numel() / c) as f64;
    let mut mean = vec![0f64; c];
    for (i, &v) in image.data().iter().enumerate() {
        mean[i % c] += v as f64;
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; c];
    for (i, &v) in image.data().iter().enumerate() {
        let d = v as f64 - mean[i % c];
        var[i % c] += d * d;
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt().max(ZSCORE_EPS)).collect();
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = ((*v as f64 - mean[i % c]) / std[i % c]) as f32;
    }
    out
}

/// Network-ready batch: z-scored images `[n, h, w, 3]`, targets
/// `[n, h, w, 1]`, and the masks for scoring.
pub struct Batch<T: Real> {
    pub images: Tensor<T>,
    pub targets: Tensor<T>,
    pub masks: Vec<Mask>,
}

pub fn make_batch<T: Real>(samples: &[&Sample]) -> Result<Batch<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut images = Vec::with_capacity(samples.len() * h * w * 3);
    let mut targets = Vec::with_capacity(samples.len() * h * w);
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Dataset(format!(
                "sample {} is {}x{}, batch is {h}x{w}",
                s.id,
                s.height(),
                s.width()
            )));
        }
        images.extend(
            zscore_normalize(&s.image)
                .data()
                .iter()
                .map(|&v| T::of(v as f64)),
        );
        targets.extend(s.mask.data.iter().map(|&v| T::of(v as f64)));
        masks.push(s.mask.clone());
    }
    let n = samples.len();
    Ok(Batch {
        images: Tensor::new([n, h, w, 3], images)?,
        targets: Tensor::new([n, h, w, 1], targets)?,
        masks,
    })
}
