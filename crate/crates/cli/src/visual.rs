//! Contour overlays and attention heatmaps.

use focus_unet::metrics::Mask;
use focus_unet::{Error, Real, Result, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};

pub const GROUND_TRUTH_COLOUR: [u8; 3] = [0, 255, 0];
pub const PREDICTION_COLOUR: [u8; 3] = [255, 0, 255];

/// Foreground pixels with a 4-neighbour outside the mask (or the frame).
pub fn contour(mask: &Mask) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let mut out = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let border = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            out.data[y * w + x] = border as u8;
        }
    }
    out
}

fn to_rgb_image(image: &Tensor<f32>) -> Result<RgbImage> {
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
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches"))
}

/// The image with the ground-truth contour in green (when given) and the
/// predicted contour in magenta drawn on top.
pub fn overlay(image: &Tensor<f32>, truth: Option<&Mask>, pred: &Mask) -> Result<RgbImage> {
    let mut img = to_rgb_image(image)?;
    let (w, h) = img.dimensions();
    let layers = truth
        .map(|t| (t, GROUND_TRUTH_COLOUR))
        .into_iter()
        .chain([(pred, PREDICTION_COLOUR)]);
    for (mask, colour) in layers {
        if (mask.height, mask.width) != (h as usize, w as usize) {
            return Err(Error::DimensionMismatch {
                image: (h as usize, w as usize),
                mask: (mask.height, mask.width),
            });
        }
        let edge = contour(mask);
        for (i, &v) in edge.data.iter().enumerate() {
            if v != 0 {
                img.put_pixel(
                    (i % mask.width) as u32,
                    (i / mask.width) as u32,
                    Rgb(colour),
                );
            }
        }
    }
    Ok(img)
}

/// Per-pixel maximum over channels of a `[1, h, w, c]` coefficient map.
pub fn channel_max<T: Real>(coefficients: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let (n, h, w, c) = coefficients.dims4()?;
    if n != 1 {
        return Err(Error::InvalidShape {
            shape: coefficients.shape().to_vec(),
            reason: "expected a single image".into(),
        });
    }
    let map = coefficients
        .data()
        .chunks(c)
        .map(|px| {
            px.iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok((h, w, map))
}

/// Grayscale rendering of values in `[0, 1]` on an absolute scale, so maps
/// for different focal parameters stay comparable.
pub fn heatmap(height: usize, width: usize, values: &[f64]) -> GrayImage {
    let mut img = GrayImage::new(width as u32, height as u32);
    for (i, &v) in values.iter().enumerate() {
        let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel((i % width) as u32, (i / width) as u32, Luma([level]));
    }
    img
}
