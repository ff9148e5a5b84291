//! Hard-thresholded segmentation metrics.
//!
//! Every ratio whose numerator and denominator are both zero evaluates to 1.
//! That single rule yields the usual degenerate conventions: empty versus
//! empty scores 1 everywhere; an empty prediction on a non-empty truth has
//! DSC = IoU = recall = 0 and precision 1; the reverse has precision = DSC =
//! IoU = 0 and recall 1.

use crate::error::{Error, Result};
use crate::losses::{BACKGROUND, FOREGROUND};
use crate::tensor::{Real, Tensor};

/// A binary mask stored as one byte per pixel (0 or 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("mask has {} pixels", data.len()),
            });
        }
        Ok(Mask {
            height,
            width,
            data: data.into_iter().map(|v| (v != 0) as u8).collect(),
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn flip_horizontal(&self) -> Mask {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Mask {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Two-class one-hot encoding `[h, w, 2]`.
    pub fn one_hot<T: Real>(&self) -> Tensor<T> {
        let mut data = vec![T::zero(); self.data.len() * 2];
        for (i, &v) in self.data.iter().enumerate() {
            let c = if v != 0 { FOREGROUND } else { BACKGROUND };
            data[2 * i + c] = T::one();
        }
        Tensor::from_parts(vec![self.height, self.width, 2], data)
    }

    /// `[h, w]` tensor of 0/1 values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }
}

/// Per-pixel argmax over the two class channels of `[n, h, w, 2]` (or
/// `[h, w, 2]`). Ties go to background.
pub fn binarize<T: Real>(pred: &Tensor<T>) -> Result<Vec<Mask>> {
    let (n, h, w) = match pred.shape() {
        &[n, h, w, 2] => (n, h, w),
        &[h, w, 2] => (1, h, w),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "expected two class channels".into(),
            })
        }
    };
    let d = pred.data();
    Ok((0..n)
        .map(|b| {
            let data = (0..h * w)
                .map(|i| {
                    let o = (b * h * w + i) * 2;
                    (d[o + FOREGROUND] > d[o + BACKGROUND]) as u8
                })
                .collect();
            Mask {
                height: h,
                width: w,
                data,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;
    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion(pred: &Mask, truth: &Mask) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: vec![pred.height, pred.width],
            rhs: vec![truth.height, truth.width],
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn dsc(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

impl Scores {
    pub fn from_counts(c: &ConfusionCounts) -> Scores {
        Scores {
            dsc: dsc(c),
            iou: iou(c),
            recall: recall(c),
            precision: precision(c),
        }
    }
}

/// Mean of per-image scores, accumulated in input order.
pub fn mean_scores(per_image: &[Scores]) -> Scores {
    if per_image.is_empty() {
        return Scores::default();
    }
    let n = per_image.len() as f64;
    let mut s = Scores::default();
    for p in per_image {
        s.dsc += p.dsc;
        s.iou += p.iou;
        s.recall += p.recall;
        s.precision += p.precision;
    }
    Scores {
        dsc: s.dsc / n,
        iou: s.iou / n,
        recall: s.recall / n,
        precision: s.precision / n,
    }
}

/// Per-image scores for a batch of predictions against matching masks.
pub fn score_batch<T: Real>(pred: &Tensor<T>, truth: &[Mask]) -> Result<Vec<Scores>> {
    let masks = binarize(pred)?;
    if masks.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "score_batch",
            lhs: vec![masks.len()],
            rhs: vec![truth.len()],
        });
    }
    masks
        .iter()
        .zip(truth)
        .map(|(p, t)| confusion(p, t).map(|c| Scores::from_counts(&c)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn: 0 }
    }

    #[test]
    fn worked_example() {
        let c = counts(2, 1, 1);
        assert!((dsc(&c) - 4.0 / 6.0).abs() < 1e-12);
        assert!((iou(&c) - 0.5).abs() < 1e-12);
        assert!((recall(&c) - 2.0 / 3.0).abs() < 1e-12);
        assert!((precision(&c) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_conventions() {
        let both_empty = Scores::from_counts(&ConfusionCounts {
            tn: 4,
            ..Default::default()
        });
        assert_eq!(
            both_empty,
            Scores {
                dsc: 1.0,
                iou: 1.0,
                recall: 1.0,
                precision: 1.0
            }
        );
        let missed = Scores::from_counts(&counts(0, 0, 3));
        assert_eq!(
            missed,
            Scores {
                dsc: 0.0,
                iou: 0.0,
                recall: 0.0,
                precision: 1.0
            }
        );
        let hallucinated = Scores::from_counts(&counts(0, 3, 0));
        assert_eq!(
            hallucinated,
            Scores {
                dsc: 0.0,
                iou: 0.0,
                recall: 1.0,
                precision: 0.0
            }
        );
    }

    #[test]
    fn binarize_ties_to_background() {
        let t = Tensor::<f32>::from_f64([1, 1, 3, 2], &[0.4, 0.6, 0.5, 0.5, 0.9, 0.1]).unwrap();
        let m = binarize(&t).unwrap();
        assert_eq!(m[0].data, vec![1, 0, 0]);
        let again = binarize(&m[0].one_hot::<f32>()).unwrap();
        assert_eq!(again[0], m[0]);
    }

    #[test]
    fn identical_and_inverted() {
        let a = Mask::new(2, 2, vec![1, 0, 1, 1]).unwrap();
        let inv = Mask::new(2, 2, a.data.iter().map(|v| 1 - v).collect()).unwrap();
        let c = confusion(&a, &a).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let c = confusion(&a, &inv).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(c.total(), 4);
        assert!(confusion(&a, &Mask::zeros(1, 4)).is_err());
    }

    #[test]
    fn mean_is_per_image() {
        let s = mean_scores(&[
            Scores {
                dsc: 1.0,
                iou: 1.0,
                recall: 1.0,
                precision: 1.0,
            },
            Scores {
                dsc: 0.0,
                iou: 0.5,
                recall: 0.0,
                precision: 1.0,
            },
        ]);
        assert_eq!(s.dsc, 0.5);
        assert_eq!(s.iou, 0.75);
    }
}
