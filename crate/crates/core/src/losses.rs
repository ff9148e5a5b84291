//! Soft segmentation losses on two-class softmax output.
//!
//! `pred` is `[n, h, w, 2]` with channel [`BACKGROUND`] then [`FOREGROUND`];
//! `target` is the `[n, h, w, 1]` foreground indicator (1 on the object).
//! True/false positive and negative counts are soft sums of probabilities.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

pub const BACKGROUND: usize = 0;
pub const FOREGROUND: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub ftl_gamma: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tversky_alpha: 0.3,
            tversky_beta: 0.7,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            ftl_gamma: 0.75,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tversky_alpha < 0.0 || self.tversky_beta < 0.0 {
            return Err(Error::config("loss.tversky", "alpha and beta must be >= 0"));
        }
        if self.focal_gamma < 0.0 || !(self.ftl_gamma > 0.0) {
            return Err(Error::config(
                "loss.gamma",
                "focal exponents must be positive",
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("loss.epsilon", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::config("loss.focal_alpha", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// The loss being optimised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// `(1 - DSC) + CE`
    DiceCe,
    /// Focal Tversky + Focal loss.
    HybridFocal,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::DiceCe => "dsc_ce",
            LossKind::HybridFocal => "hfl",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsc_ce" | "dice_ce" => Ok(LossKind::DiceCe),
            "hfl" | "hybrid_focal" => Ok(LossKind::HybridFocal),
            _ => Err(Error::config("loss", format!("unknown loss {s:?}"))),
        }
    }
}

/// Expands a `[n, h, w]` (or `[h, w]`) 0/1 mask into the `[n, h, w, 1]`
/// target layout.
pub fn target_tensor<T: Real>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = mask.shape().to_vec();
    if shape.len() == 2 {
        shape.insert(0, 1);
    }
    if shape.len() == 3 {
        shape.push(1);
    }
    mask.clone().reshape(shape)
}

struct Soft {
    fg: Var,
    bg: Var,
    target: Var,
    not_target: Var,
}

fn split<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Soft> {
    let ps = g.shape(pred);
    let ts = g.shape(target);
    if ps.len() != 4 || ps[3] != 2 || ts.len() != 4 || ts[3] != 1 || ps[..3] != ts[..3] {
        return Err(Error::ShapeMismatch {
            op: "loss (pred [n,h,w,2] vs target [n,h,w,1])",
            lhs: ps.to_vec(),
            rhs: ts.to_vec(),
        });
    }
    let fg = g.slice_channel(pred, FOREGROUND)?;
    let bg = g.slice_channel(pred, BACKGROUND)?;
    let not_target = g.rsub_scalar(1.0, target)?;
    Ok(Soft {
        fg,
        bg,
        target,
        not_target,
    })
}

fn soft_sum<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let p = g.mul(a, b)?;
    g.sum(p)
}

/// `(TP + ε) / (½(Σp + Σg) + ε)`, the soft Dice coefficient. Equivalent to
/// `2TP / (Σp + Σg)` up to smoothing.
pub fn soft_dice<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, eps: f64) -> Result<Var> {
    let s = split(g, pred, target)?;
    let tp = soft_sum(g, s.fg, s.target)?;
    let sp = g.sum(s.fg)?;
    let sg = g.sum(s.target)?;
    let num = g.add_scalar(tp, eps)?;
    let total = g.add(sp, sg)?;
    let half = g.mul_scalar(total, 0.5)?;
    let den = g.add_scalar(half, eps)?;
    g.div(num, den)
}

/// `(TP + ε) / (TP + α·FP + β·FN + ε)`.
pub fn tversky_index<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    alpha: f64,
    beta: f64,
    eps: f64,
) -> Result<Var> {
    let s = split(g, pred, target)?;
    let tp = soft_sum(g, s.fg, s.target)?;
    let fp = soft_sum(g, s.fg, s.not_target)?;
    let fn_ = soft_sum(g, s.bg, s.target)?;
    let afp = g.mul_scalar(fp, alpha)?;
    let bfn = g.mul_scalar(fn_, beta)?;
    let d0 = g.add(tp, afp)?;
    let d1 = g.add(d0, bfn)?;
    let den = g.add_scalar(d1, eps)?;
    let num = g.add_scalar(tp, eps)?;
    g.div(num, den)
}

pub fn tversky_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let ti = tversky_index(
        g,
        pred,
        target,
        cfg.tversky_alpha,
        cfg.tversky_beta,
        cfg.epsilon,
    )?;
    g.rsub_scalar(1.0, ti)
}

/// `(1 - TI)^γ`
pub fn focal_tversky_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    cfg: &LossConfig,
    gamma: f64,
) -> Result<Var> {
    let tl = tversky_loss(g, pred, target, cfg)?;
    // 1 - TI can round a hair below zero; the power is only defined on [0, ∞).
    let tl = g.clamp(tl, 0.0, f64::INFINITY)?;
    g.pow_scalar(tl, gamma)
}

/// Foreground probability clipped to `[ε, 1 - ε]`.
fn clipped_fg<T: Real>(g: &mut Graph<T>, s: &Soft, eps: f64) -> Result<Var> {
    g.clamp(s.fg, eps, 1.0 - eps)
}

/// Binary cross entropy on the foreground channel, averaged over pixels.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, eps: f64) -> Result<Var> {
    let s = split(g, pred, target)?;
    let y_hat = clipped_fg(g, &s, eps)?;
    let log_p = g.ln(y_hat)?;
    let one_minus = g.rsub_scalar(1.0, y_hat)?;
    let log_q = g.ln(one_minus)?;
    let a = g.mul(s.target, log_p)?;
    let b = g.mul(s.not_target, log_q)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll)?;
    g.neg(m)
}

/// Per-pixel `p_t` (probability of the true class) and the class weight
/// `α_t` (α on foreground pixels, 1 - α on background).
fn focal_terms<T: Real>(g: &mut Graph<T>, s: &Soft, alpha: f64, eps: f64) -> Result<(Var, Var)> {
    let y_hat = clipped_fg(g, s, eps)?;
    let q = g.rsub_scalar(1.0, y_hat)?;
    let a = g.mul(s.target, y_hat)?;
    let b = g.mul(s.not_target, q)?;
    let p_t = g.add(a, b)?;
    let wa = g.mul_scalar(s.target, alpha)?;
    let wb = g.mul_scalar(s.not_target, 1.0 - alpha)?;
    let alpha_t = g.add(wa, wb)?;
    Ok((p_t, alpha_t))
}

/// Mean of `α_t · (-ln p_t)`.
pub fn weighted_cross_entropy<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    alpha: f64,
    eps: f64,
) -> Result<Var> {
    let s = split(g, pred, target)?;
    let (p_t, alpha_t) = focal_terms(g, &s, alpha, eps)?;
    let log_p = g.ln(p_t)?;
    let nll = g.neg(log_p)?;
    let w = g.mul(alpha_t, nll)?;
    g.mean(w)
}

/// Mean of `α_t · (1 - p_t)^γ · (-ln p_t)`.
pub fn focal_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    alpha: f64,
    gamma: f64,
    eps: f64,
) -> Result<Var> {
    let s = split(g, pred, target)?;
    let (p_t, alpha_t) = focal_terms(g, &s, alpha, eps)?;
    let log_p = g.ln(p_t)?;
    let nll = g.neg(log_p)?;
    let w = g.mul(alpha_t, nll)?;
    let hard = g.rsub_scalar(1.0, p_t)?;
    let modulator = g.pow_scalar(hard, gamma)?;
    let fl = g.mul(w, modulator)?;
    g.mean(fl)
}

/// `(1 - DSC) + CE`
pub fn dice_ce_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let dsc = soft_dice(g, pred, target, cfg.epsilon)?;
    let dl = g.rsub_scalar(1.0, dsc)?;
    let ce = cross_entropy(g, pred, target, cfg.epsilon)?;
    g.add(dl, ce)
}

/// Focal Tversky loss plus Focal loss.
pub fn hybrid_focal_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let ftl = focal_tversky_loss(g, pred, target, cfg, cfg.ftl_gamma)?;
    let fl = focal_loss(
        g,
        pred,
        target,
        cfg.focal_alpha,
        cfg.focal_gamma,
        cfg.epsilon,
    )?;
    g.add(ftl, fl)
}

/// The Hybrid Focal loss with its focal exponents removed: Tversky loss plus
/// α-weighted cross entropy.
pub fn non_focal_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let tl = tversky_loss(g, pred, target, cfg)?;
    let wce = weighted_cross_entropy(g, pred, target, cfg.focal_alpha, cfg.epsilon)?;
    g.add(tl, wce)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three pixels with foreground probabilities `p` and labels `y`.
    fn pixels(g: &mut Graph<f64>, p: &[f64], y: &[f64]) -> (Var, Var) {
        let n = p.len();
        let data: Vec<f64> = p.iter().flat_map(|&v| [1.0 - v, v]).collect();
        let pred = g.input(Tensor::new([1, 1, n, 2], data).unwrap());
        let target = g.constant(Tensor::from_f64([1, 1, n, 1], y).unwrap());
        (pred, target)
    }

    fn eval(f: impl FnOnce(&mut Graph<f64>, Var, Var) -> Result<Var>, p: &[f64], y: &[f64]) -> f64 {
        let mut g = Graph::new();
        let (pred, target) = pixels(&mut g, p, y);
        let v = f(&mut g, pred, target).unwrap();
        g.value(v).item().unwrap()
    }

    const P: [f64; 3] = [0.8, 0.6, 0.2];
    const Y: [f64; 3] = [1.0, 1.0, 0.0];

    #[test]
    fn three_pixel_fixtures() {
        let cfg = LossConfig::default();
        let dsc = eval(|g, p, t| soft_dice(g, p, t, 1e-6), &P, &Y);
        assert!((dsc - 2.8 / 3.6).abs() < 1e-6, "{dsc}");
        let ti = eval(|g, p, t| tversky_index(g, p, t, 0.3, 0.7, 1e-6), &P, &Y);
        assert!((ti - 1.4 / 1.88).abs() < 1e-6, "{ti}");
        let tl = eval(|g, p, t| tversky_loss(g, p, t, &cfg), &P, &Y);
        assert!((tl - (1.0 - 1.4 / 1.88)).abs() < 1e-6);
        let ftl = eval(|g, p, t| focal_tversky_loss(g, p, t, &cfg, 0.75), &P, &Y);
        assert!((ftl - (1.0 - 1.4 / 1.88f64).powf(0.75)).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_of_uniform_is_ln2() {
        let ce = eval(
            |g, p, t| cross_entropy(g, p, t, 1e-6),
            &[0.5, 0.5],
            &[1.0, 0.0],
        );
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
        let cfg = LossConfig::default();
        let dce = eval(
            |g, p, t| dice_ce_loss(g, p, t, &cfg),
            &[0.5, 0.5],
            &[1.0, 0.0],
        );
        let dsc = eval(|g, p, t| soft_dice(g, p, t, 1e-6), &[0.5, 0.5], &[1.0, 0.0]);
        assert!((dce - (1.0 - dsc + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn focal_single_pixel() {
        let fl = eval(
            |g, p, t| focal_loss(g, p, t, 0.25, 2.0, 1e-6),
            &[0.5],
            &[1.0],
        );
        assert!(
            (fl - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-9,
            "{fl}"
        );
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let cfg = LossConfig::default();
        let p = [1.0, 0.0, 1.0, 0.0];
        let y = [1.0, 0.0, 1.0, 0.0];
        let losses: [(&str, f64); 6] = [
            (
                "dice_ce",
                eval(|g, a, b| dice_ce_loss(g, a, b, &cfg), &p, &y),
            ),
            (
                "ce",
                eval(|g, a, b| cross_entropy(g, a, b, cfg.epsilon), &p, &y),
            ),
            (
                "tversky",
                eval(|g, a, b| tversky_loss(g, a, b, &cfg), &p, &y),
            ),
            (
                "ftl",
                eval(|g, a, b| focal_tversky_loss(g, a, b, &cfg, 0.75), &p, &y),
            ),
            (
                "fl",
                eval(
                    |g, a, b| focal_loss(g, a, b, 0.25, 2.0, cfg.epsilon),
                    &p,
                    &y,
                ),
            ),
            (
                "hfl",
                eval(|g, a, b| hybrid_focal_loss(g, a, b, &cfg), &p, &y),
            ),
        ];
        for (name, v) in losses {
            assert!((0.0..1e-5).contains(&v), "{name} = {v}");
        }
    }

    #[test]
    fn empty_prediction_dice_is_near_zero() {
        let d = eval(
            |g, p, t| soft_dice(g, p, t, 1e-6),
            &[0.0, 0.0, 0.0],
            &[1.0, 1.0, 0.0],
        );
        assert!(d < 1e-6);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let pred = g.constant(Tensor::full([1, 2, 2, 2], 0.5));
        let target = g.constant(Tensor::zeros([1, 2, 3, 1]));
        assert!(soft_dice(&mut g, pred, target, 1e-6).is_err());
    }

    #[test]
    fn loss_kind_parse() {
        assert_eq!("hfl".parse::<LossKind>().unwrap(), LossKind::HybridFocal);
        assert_eq!("dsc_ce".parse::<LossKind>().unwrap(), LossKind::DiceCe);
        assert!("mse".parse::<LossKind>().is_err());
    }
}
