//! Metric tables: per-image CSV, fold summaries and weighted combinations.

use focus_unet::metrics::{mean_scores, Scores};
use serde_json::{json, Value};

pub const SCORE_HEADER: &str = "dsc,iou,recall,precision";

fn score_cells(s: &Scores) -> String {
    format!("{},{},{},{}", s.dsc, s.iou, s.recall, s.precision)
}

pub fn scores_json(s: &Scores) -> Value {
    json!({ "dsc": s.dsc, "iou": s.iou, "recall": s.recall, "precision": s.precision })
}

/// `id,dsc,iou,recall,precision` with one row per image.
pub fn per_image_csv(ids: &[String], scores: &[Scores]) -> String {
    let mut out = format!("id,{SCORE_HEADER}\n");
    for (id, s) in ids.iter().zip(scores) {
        out.push_str(&format!("{id},{}\n", score_cells(s)));
    }
    out
}

/// Mean of per-dataset means weighted by image count, which equals the
/// mean over the pooled images.
pub fn combined(parts: &[(usize, Scores)]) -> Option<Scores> {
    let n: usize = parts.iter().map(|p| p.0).sum();
    if n == 0 {
        return None;
    }
    let w =
        |f: fn(&Scores) -> f64| parts.iter().map(|(k, s)| *k as f64 * f(s)).sum::<f64>() / n as f64;
    Some(Scores {
        dsc: w(|s| s.dsc),
        iou: w(|s| s.iou),
        recall: w(|s| s.recall),
        precision: w(|s| s.precision),
    })
}

/// Mean and sample standard deviation of each metric across folds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldSummary {
    pub folds: usize,
    pub mean: Scores,
    pub std: Scores,
}

pub fn summarise_folds(per_fold: &[Scores]) -> FoldSummary {
    let mean = mean_scores(per_fold);
    let n = per_fold.len();
    let sd = |f: fn(&Scores) -> f64| {
        if n < 2 {
            return 0.0;
        }
        let m = f(&mean);
        (per_fold.iter().map(|s| (f(s) - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    FoldSummary {
        folds: n,
        mean,
        std: Scores {
            dsc: sd(|s| s.dsc),
            iou: sd(|s| s.iou),
            recall: sd(|s| s.recall),
            precision: sd(|s| s.precision),
        },
    }
}

impl FoldSummary {
    /// `"0.875±0.016"` style cell.
    pub fn cell(&self, f: fn(&Scores) -> f64) -> String {
        format!("{:.3}±{:.3}", f(&self.mean), f(&self.std))
    }

    pub fn to_json(&self) -> Value {
        json!({ "folds": self.folds, "mean": scores_json(&self.mean), "std": scores_json(&self.std) })
    }
}

/// `fold,images,dsc,...` rows followed by `mean` and `std` rows.
pub fn fold_csv(per_fold: &[(usize, Scores)], summary: &FoldSummary) -> String {
    let mut out = format!("fold,images,{SCORE_HEADER}\n");
    for (i, (n, s)) in per_fold.iter().enumerate() {
        out.push_str(&format!("{i},{n},{}\n", score_cells(s)));
    }
    let total: usize = per_fold.iter().map(|p| p.0).sum();
    out.push_str(&format!("mean,{total},{}\n", score_cells(&summary.mean)));
    out.push_str(&format!("std,{total},{}\n", score_cells(&summary.std)));
    out
}
