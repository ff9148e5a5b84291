//! On-the-fly augmentation: scale, rotation, elastic warp and horizontal
//! mirror applied identically to image and mask, then gamma on the image.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Mask, Sample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub scale_range: (f64, f64),
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Elastic magnitude; control-point displacements have std `α / σ` pixels.
    pub elastic_alpha: f64,
    /// Control grid is `(σ + 1) × (σ + 1)` points spanning the image.
    pub elastic_sigma: f64,
    pub mirror_prob: f64,
    pub gamma_range: (f64, f64),
    /// Probability of applying each of scale, rotation, elastic and gamma.
    pub apply_prob: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            scale_range: (0.85, 1.15),
            rotation_deg: 15.0,
            elastic_alpha: 10.0,
            elastic_sigma: 4.0,
            mirror_prob: 0.5,
            gamma_range: (0.7, 1.5),
            apply_prob: 0.5,
        }
    }
}

impl AugmentationConfig {
    /// No transform is ever applied.
    pub fn disabled() -> Self {
        AugmentationConfig {
            mirror_prob: 0.0,
            apply_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        let (s0, s1) = self.scale_range;
        let (g0, g1) = self.gamma_range;
        if !(s0 > 0.0 && s0 <= 1.0 && 1.0 <= s1) {
            return Err(crate::Error::config("aug.scale", "range must bracket 1"));
        }
        if !(g0 > 0.0 && g0 <= 1.0 && 1.0 <= g1) {
            return Err(crate::Error::config("aug.gamma", "range must bracket 1"));
        }
        if !unit(self.mirror_prob) || !unit(self.apply_prob) {
            return Err(crate::Error::config(
                "aug.prob",
                "probabilities must lie in [0, 1]",
            ));
        }
        if self.rotation_deg < 0.0 || self.elastic_alpha < 0.0 || !(self.elastic_sigma >= 1.0) {
            return Err(crate::Error::config(
                "aug.elastic",
                "magnitudes must be >= 0, sigma >= 1",
            ));
        }
        Ok(())
    }
}

struct Elastic {
    cells: usize,
    dy: Vec<f64>,
    dx: Vec<f64>,
}

impl Elastic {
    /// Bilinear interpolation of the control-point displacements at the
    /// normalised position `(u, v) ∈ [0, 1]²`.
    fn at(&self, u: f64, v: f64) -> (f64, f64) {
        let n = self.cells;
        let gu = (u * n as f64).clamp(0.0, n as f64);
        let gv = (v * n as f64).clamp(0.0, n as f64);
        let i0 = (gu.floor() as usize).min(n - 1);
        let j0 = (gv.floor() as usize).min(n - 1);
        let (fu, fv) = (gu - i0 as f64, gv - j0 as f64);
        let idx = |i: usize, j: usize| i * (n + 1) + j;
        let lerp = |f: &[f64]| {
            let a = f[idx(i0, j0)] * (1.0 - fv) + f[idx(i0, j0 + 1)] * fv;
            let b = f[idx(i0 + 1, j0)] * (1.0 - fv) + f[idx(i0 + 1, j0 + 1)] * fv;
            a * (1.0 - fu) + b * fu
        };
        (lerp(&self.dy), lerp(&self.dx))
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentationConfig, rng: &mut R) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let p = cfg.apply_prob;
    let scale = if rng.random::<f64>() < p {
        rng.random_range(cfg.scale_range.0..=cfg.scale_range.1)
    } else {
        1.0
    };
    let angle = if rng.random::<f64>() < p && cfg.rotation_deg > 0.0 {
        rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg)
            .to_radians()
    } else {
        0.0
    };
    let elastic = if rng.random::<f64>() < p && cfg.elastic_alpha > 0.0 {
        let cells = cfg.elastic_sigma.round().max(1.0) as usize;
        let std = cfg.elastic_alpha / cfg.elastic_sigma;
        let n = (cells + 1) * (cells + 1);
        let mut draw = || {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    std * z
                })
                .collect::<Vec<f64>>()
        };
        let dy = draw();
        let dx = draw();
        Some(Elastic { cells, dy, dx })
    } else {
        None
    };
    let mirror = rng.random::<f64>() < cfg.mirror_prob;
    let gamma = if rng.random::<f64>() < p {
        Some(rng.random_range(cfg.gamma_range.0..=cfg.gamma_range.1))
    } else {
        None
    };

    let geometric = scale != 1.0 || angle != 0.0 || elastic.is_some() || mirror;
    let (mut image, mask) = if geometric {
        warp(sample, scale, angle, elastic.as_ref(), mirror)
    } else {
        (sample.image.clone(), sample.mask.clone())
    };
    if let Some(gm) = gamma {
        for v in image.data_mut() {
            *v = ((*v as f64 / 255.0).clamp(0.0, 1.0).powf(gm) * 255.0) as f32;
        }
    }
    debug_assert_eq!((mask.height, mask.width), (h, w));
    Sample {
        id: sample.id.clone(),
        image,
        mask,
    }
}

/// Inverse-maps every output pixel into the source; image bilinear, mask
/// nearest, zeros outside the frame.
fn warp(
    sample: &Sample,
    scale: f64,
    angle: f64,
    elastic: Option<&Elastic>,
    mirror: bool,
) -> (Tensor<f32>, Mask) {
    let (h, w) = (sample.height(), sample.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let src = sample.image.data();
    let mut image = vec![0f32; h * w * 3];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut px = x as f64 - cx;
            let py = y as f64 - cy;
            if mirror {
                px = -px;
            }
            // Inverse of rotate-then-scale.
            let ry = (cos * py - sin * px) / scale;
            let rx = (sin * py + cos * px) / scale;
            let (mut sy, mut sx) = (ry + cy, rx + cx);
            if let Some(e) = elastic {
                let (dy, dx) = e.at(
                    y as f64 / (h - 1).max(1) as f64,
                    x as f64 / (w - 1).max(1) as f64,
                );
                sy += dy;
                sx += dx;
            }
            let o = y * w + x;
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                mask[o] = sample.mask.data[ny as usize * w + nx as usize];
            }
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            for c in 0..3 {
                let at = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        0.0
                    } else {
                        src[(yy as usize * w + xx as usize) * 3 + c] as f64
                    }
                };
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
                let bot = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
                image[o * 3 + c] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    (
        Tensor::from_parts(vec![h, w, 3], image),
        Mask {
            height: h,
            width: w,
            data: mask,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Sample {
        let img = Tensor::from_fn([8, 10, 3], |i| (i * 7 % 256) as f32);
        let mut m = Mask::zeros(8, 10);
        for i in [22, 23, 32, 33, 34] {
            m.data[i] = 1;
        }
        Sample::new("s", img, m).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(augment(&s, &AugmentationConfig::disabled(), &mut rng), s);
        }
    }

    #[test]
    fn double_mirror_is_identity() {
        let s = sample();
        let cfg = AugmentationConfig {
            mirror_prob: 1.0,
            apply_prob: 0.0,
            ..AugmentationConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let once = augment(&s, &cfg, &mut rng);
        assert_ne!(once, s);
        assert_eq!((once.mask.data[27], once.mask.data[22]), (1, 0));
        assert_eq!(augment(&once, &cfg, &mut rng), s);
    }

    #[test]
    fn any_draw_keeps_mask_binary() {
        let s = sample();
        let cfg = AugmentationConfig {
            apply_prob: 1.0,
            ..AugmentationConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = augment(&s, &cfg, &mut rng);
            assert_eq!((a.height(), a.width()), (8, 10));
            assert!(a.mask.data.iter().all(|&v| v <= 1));
            assert!(a.image.all_finite());
        }
    }
}
