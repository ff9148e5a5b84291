//! Synthetic polyp-like scenes: a smooth reddish background with one to
//! three brighter, slightly textured elliptical blobs as foreground.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Mask, Sample};
use crate::nn::derive_seed;
use crate::tensor::Tensor;

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.25;

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalised radius: `< 1` inside.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (self.cos * dx + self.sin * dy) / self.rx;
        let v = (-self.sin * dx + self.cos * dy) / self.ry;
        (u * u + v * v).sqrt()
    }
}

/// Sum of a few random low-frequency cosines, roughly in `[-1, 1]`.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, waves: usize, max_freq: f64) -> Vec<f64> {
    let params: Vec<(f64, f64, f64)> = (0..waves)
        .map(|_| {
            (
                rng.random_range(-max_freq..max_freq),
                rng.random_range(-max_freq..max_freq),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (v, u) = (y as f64 / h as f64, x as f64 / w as f64);
            let s: f64 = params
                .iter()
                .map(|&(fy, fx, ph)| (std::f64::consts::TAU * (fy * v + fx * u) + ph).cos())
                .sum();
            out[y * w + x] = s / waves as f64;
        }
    }
    out
}

/// Sample `index` of the synthetic set drawn with `seed`.
pub fn synth_sample(index: usize, height: usize, width: usize, seed: u64) -> Sample {
    let id = format!("synth_{index:04}");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &id));
    let (h, w) = (height, width);
    let short = h.min(w) as f64;

    let (blobs, mask) = loop {
        let count = rng.random_range(1..=3);
        let blobs: Vec<Ellipse> = (0..count)
            .map(|_| {
                let ry = rng.random_range(0.07..0.22) * short;
                let rx = ry * rng.random_range(0.7..1.4);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Ellipse {
                    cy: rng.random_range(0.15..0.85) * h as f64,
                    cx: rng.random_range(0.15..0.85) * w as f64,
                    ry,
                    rx,
                    cos: angle.cos(),
                    sin: angle.sin(),
                }
            })
            .collect();
        let mut mask = Mask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let inside = blobs.iter().any(|b| b.radius(y as f64, x as f64) < 1.0);
                mask.data[y * w + x] = inside as u8;
            }
        }
        let frac = mask.count() as f64 / (h * w) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break (blobs, mask);
        }
    };

    let base = [
        rng.random_range(140.0..170.0),
        rng.random_range(70.0..95.0),
        rng.random_range(60.0..85.0),
    ];
    let offset = [
        rng.random_range(35.0..55.0),
        rng.random_range(20.0..35.0),
        rng.random_range(10.0..25.0),
    ];
    let background = smooth_field(&mut rng, h, w, 4, 2.5);
    let texture = smooth_field(&mut rng, h, w, 6, 9.0);
    let edge = 0.12;
    let mut data = vec![0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let r = blobs
                .iter()
                .map(|b| b.radius(y as f64, x as f64))
                .fold(f64::INFINITY, f64::min);
            // Soft membership: 1 well inside, 0.5 on the boundary, 0 outside.
            let soft = 1.0 / (1.0 + ((r - 1.0) / edge).exp());
            let noise: f64 = rng.random_range(-6.0..6.0);
            for c in 0..3 {
                let v =
                    base[c] + 22.0 * background[i] + soft * (offset[c] + 8.0 * texture[i]) + noise;
                data[i * 3 + c] = v.clamp(0.0, 255.0) as f32;
            }
        }
    }
    Sample {
        id,
        image: Tensor::from_parts(vec![h, w, 3], data),
        mask,
    }
}

/// `n` synthetic samples; each one depends only on `(seed, index)`.
pub fn synth_polyp_dataset(n: usize, height: usize, width: usize, seed: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| synth_sample(i, height, width, seed))
        .collect()
}
