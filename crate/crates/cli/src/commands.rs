//! Subcommand implementations. Each one writes its resolved configuration
//! next to its outputs.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use focus_unet::attention::{GateOptions, GateType};
use focus_unet::config::{float_text, KeyValues};
use focus_unet::data::{
    kfold_split, load_dataset_dir, load_mask, load_rgb, make_batch, resize, resize_bilinear,
    resize_nearest, save_dataset, save_mask, single_split, synth_polyp_dataset, Sample,
};
use focus_unet::gradcheck::{run_suite, SuiteResult, SUITE_TOLERANCE};
use focus_unet::losses::LossKind;
use focus_unet::metrics::{binarize, confusion, mean_scores, Mask, Scores};
use focus_unet::model::{FocusUNet, NetworkConfig};
use focus_unet::nn::derive_seed;
use focus_unet::trainer::{evaluate, log_to_csv, train, Checkpoint, EpochLog};
use focus_unet::{Error, Graph, Tensor};
use serde_json::json;
use thiserror::Error as ThisError;

use crate::report::{combined, fold_csv, per_image_csv, scores_json, summarise_folds, FoldSummary};
use crate::run_config::{write_resolved, RunConfig, SplitKind};
use crate::visual::{channel_max, heatmap, overlay};

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    /// A self-check (gradient suite, attention monotonicity) failed.
    #[error("check failed: {0}")]
    Check(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Process exit code for each error class.
pub fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Check(_) => 6,
        CliError::Core(e) => match e {
            Error::Config { .. } => 2,
            Error::MissingFile(_)
            | Error::NotRgb { .. }
            | Error::DimensionMismatch { .. }
            | Error::Dataset(_)
            | Error::Io(_)
            | Error::Image(_) => 3,
            Error::BadMagic
            | Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::ParamShapeMismatch { .. }
            | Error::Incompatible(_)
            | Error::UnknownParameter(_) => 4,
            Error::Diverged { .. } | Error::NonFinite { .. } => 5,
            _ => 1,
        },
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Loads a dataset directory and resizes every sample to the network input.
pub fn load_for_network(dir: &Path, net: &NetworkConfig) -> focus_unet::Result<Vec<Sample>> {
    load_dataset_dir(dir)?
        .iter()
        .map(|s| {
            if (s.height(), s.width()) == (net.height, net.width) {
                Ok(s.clone())
            } else {
                resize(s, net.height, net.width)
            }
        })
        .collect()
}

fn select(samples: &[Sample], ids: &[String]) -> Vec<Sample> {
    let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
    samples
        .iter()
        .filter(|s| wanted.contains(s.id.as_str()))
        .cloned()
        .collect()
}

fn ids_of(samples: &[Sample]) -> Vec<String> {
    samples.iter().map(|s| s.id.clone()).collect()
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub test_ids: Vec<String>,
    pub scores: Vec<Scores>,
    pub log: Vec<EpochLog>,
    pub checkpoint: PathBuf,
}

impl FoldResult {
    pub fn mean(&self) -> Scores {
        mean_scores(&self.scores)
    }
}

/// Trains on `pool` (minus a validation carve) and scores `test`.
fn run_fold(
    cfg: &RunConfig,
    fold: usize,
    pool: &[Sample],
    test: &[Sample],
    dir: &Path,
) -> CliResult<FoldResult> {
    let seed = derive_seed(cfg.data.seed, &format!("validation/{fold}"));
    let plan = single_split(&ids_of(pool), cfg.data.val_fraction, seed)?;
    let train_set = select(pool, &plan.folds[0]);
    let val_set = select(pool, &plan.folds[1]);
    let mut model = FocusUNet::<f32>::build(cfg.net.clone(), cfg.train.seed)?;
    let outcome = train(&mut model, &train_set, &val_set, &cfg.train)?;
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    outcome.best.save(&checkpoint)?;
    std::fs::write(dir.join("log.csv"), log_to_csv(&outcome.log)).map_err(Error::from)?;
    let best = outcome.best.into_model()?;
    let scores = evaluate(&best, test, cfg.train.batch_size)?;
    let test_ids = ids_of(test);
    std::fs::write(
        dir.join("test_scores.csv"),
        per_image_csv(&test_ids, &scores),
    )
    .map_err(Error::from)?;
    Ok(FoldResult {
        fold,
        test_ids,
        scores,
        log: outcome.log,
        checkpoint,
    })
}

/// Runs the configured protocol: one split, or one model per fold under
/// `out/fold{i}`.
pub fn run_protocol(cfg: &RunConfig, out: &Path) -> CliResult<Vec<FoldResult>> {
    let all = load_for_network(cfg.data_dir()?, &cfg.net)?;
    match cfg.data.split {
        SplitKind::Single => {
            let (pool, test) = match &cfg.data.test_dir {
                Some(dir) => (all, load_for_network(dir, &cfg.net)?),
                None => {
                    let plan = single_split(&ids_of(&all), cfg.data.test_fraction, cfg.data.seed)?;
                    (select(&all, &plan.folds[0]), select(&all, &plan.folds[1]))
                }
            };
            Ok(vec![run_fold(cfg, 0, &pool, &test, out)?])
        }
        SplitKind::KFold => {
            let plan = kfold_split(&ids_of(&all), cfg.data.folds, cfg.data.seed)?;
            plan.partitions()
                .iter()
                .enumerate()
                .map(|(i, (train_ids, test_ids))| {
                    let dir = out.join(format!("fold{i}"));
                    run_fold(
                        cfg,
                        i,
                        &select(&all, train_ids),
                        &select(&all, test_ids),
                        &dir,
                    )
                })
                .collect()
        }
    }
}

fn write_summary(results: &[FoldResult], out: &Path) -> CliResult<FoldSummary> {
    let per_fold: Vec<(usize, Scores)> =
        results.iter().map(|r| (r.scores.len(), r.mean())).collect();
    let means: Vec<Scores> = per_fold.iter().map(|p| p.1).collect();
    let summary = summarise_folds(&means);
    std::fs::write(out.join("summary.csv"), fold_csv(&per_fold, &summary)).map_err(Error::from)?;
    let folds: Vec<_> = results
        .iter()
        .map(|r| {
            json!({
                "fold": r.fold,
                "images": r.scores.len(),
                "best_epoch": r.log.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).map(|e| e.epoch),
                "checkpoint": r.checkpoint.display().to_string(),
                "mean": scores_json(&r.mean()),
            })
        })
        .collect();
    let doc = json!({ "folds": folds, "summary": summary.to_json() });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&doc).unwrap(),
    )
    .map_err(Error::from)?;
    Ok(summary)
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<FoldSummary> {
    let out = &cfg.out_dir;
    cfg.write_resolved(out)?;
    let results = run_protocol(cfg, out)?;
    for r in &results {
        let m = r.mean();
        println!(
            "fold {}: {} test images, mDSC {:.4} mIoU {:.4} recall {:.4} precision {:.4} ({})",
            r.fold,
            r.scores.len(),
            m.dsc,
            m.iou,
            m.recall,
            m.precision,
            r.checkpoint.display()
        );
    }
    let summary = write_summary(&results, out)?;
    println!(
        "mDSC {} mIoU {} recall {} precision {}",
        summary.cell(|s| s.dsc),
        summary.cell(|s| s.iou),
        summary.cell(|s| s.recall),
        summary.cell(|s| s.precision)
    );
    Ok(summary)
}

// eval ------------------------------------------------------------------------

fn dataset_names(dirs: &[PathBuf]) -> Vec<String> {
    let mut seen = HashSet::new();
    dirs.iter()
        .enumerate()
        .map(|(i, d)| {
            let base = d
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("dataset{i}"));
            if seen.insert(base.clone()) {
                base
            } else {
                format!("{base}_{i}")
            }
        })
        .collect()
}

/// What `eval` scores: a checkpoint's predictions or saved mask PNGs.
pub enum EvalSource {
    Checkpoint(PathBuf),
    /// One directory of `<id>.png` predicted masks per dataset.
    Predictions(Vec<PathBuf>),
}

pub struct EvalReport {
    pub datasets: Vec<(String, Vec<String>, Vec<Scores>)>,
    pub combined: Scores,
}

pub fn cmd_eval(
    source: &EvalSource,
    data: &[PathBuf],
    out: &Path,
    batch_size: usize,
) -> CliResult<EvalReport> {
    if data.is_empty() {
        return Err(Error::config("data", "no dataset given").into());
    }
    let names = dataset_names(data);
    let mut resolved = KeyValues::new();
    resolved.set(
        "eval.data",
        data.iter()
            .map(|d| d.display().to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    let mut datasets = Vec::new();
    match source {
        EvalSource::Checkpoint(path) => {
            let model = Checkpoint::load(path)?.into_model()?;
            resolved.merge(&model.config.to_key_values());
            resolved.set("eval.checkpoint", path.display());
            for (dir, name) in data.iter().zip(&names) {
                let samples = load_for_network(dir, &model.config)?;
                let scores = evaluate(&model, &samples, batch_size)?;
                datasets.push((name.clone(), ids_of(&samples), scores));
            }
        }
        EvalSource::Predictions(preds) => {
            if preds.len() != data.len() {
                return Err(Error::config(
                    "predictions",
                    "give one predictions directory per dataset",
                )
                .into());
            }
            resolved.set(
                "eval.predictions",
                preds
                    .iter()
                    .map(|d| d.display().to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
            for ((dir, pred_dir), name) in data.iter().zip(preds).zip(&names) {
                let samples = load_dataset_dir(dir)?;
                let scores = samples
                    .iter()
                    .map(|s| {
                        let p = load_mask(&pred_dir.join(format!("{}.png", s.id)))?;
                        Ok(Scores::from_counts(&confusion(&p, &s.mask)?))
                    })
                    .collect::<focus_unet::Result<Vec<_>>>()?;
                datasets.push((name.clone(), ids_of(&samples), scores));
            }
        }
    }
    write_resolved(out, &resolved, Some("focus-unet eval"))?;
    let parts: Vec<(usize, Scores)> = datasets
        .iter()
        .map(|(_, _, s)| (s.len(), mean_scores(s)))
        .collect();
    let all = combined(&parts).ok_or_else(|| Error::Dataset("no images to evaluate".into()))?;
    let mut entries = Vec::new();
    for ((name, ids, scores), (n, mean)) in datasets.iter().zip(&parts) {
        std::fs::write(
            out.join(format!("eval_{name}.csv")),
            per_image_csv(ids, scores),
        )
        .map_err(Error::from)?;
        println!(
            "{name}: {n} images, mDSC {:.4} mIoU {:.4} recall {:.4} precision {:.4}",
            mean.dsc, mean.iou, mean.recall, mean.precision
        );
        entries.push(json!({ "name": name, "images": n, "mean": scores_json(mean) }));
    }
    let total: usize = parts.iter().map(|p| p.0).sum();
    println!("combined: {total} images, mDSC {:.4}", all.dsc);
    let doc = json!({
        "datasets": entries,
        "combined": { "images": total, "mean": scores_json(&all) },
    });
    std::fs::write(
        out.join("eval.json"),
        serde_json::to_string_pretty(&doc).unwrap(),
    )
    .map_err(Error::from)?;
    Ok(EvalReport {
        datasets,
        combined: all,
    })
}

// predict ---------------------------------------------------------------------

fn png_stems(dir: &Path) -> focus_unet::Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out: Vec<(String, PathBuf)> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Dataset(format!(
            "no PNG images in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// A network-sized sample for `image`, with an empty mask.
fn network_input(id: &str, image: &Tensor<f32>, net: &NetworkConfig) -> focus_unet::Result<Sample> {
    let resized = if image.shape()[..2] == [net.height, net.width] {
        image.clone()
    } else {
        resize_bilinear(image, net.height, net.width)?
    };
    Sample::new(id, resized, Mask::zeros(net.height, net.width))
}

pub struct PredictOptions {
    pub masks: Option<PathBuf>,
    pub intermediate: bool,
    pub batch_size: usize,
}

/// Writes `masks/<id>.png` at each input's size, and contour overlays under
/// `overlays/` (plus `<id>_intermediate.png` from the deepest head).
pub fn cmd_predict(
    checkpoint: &Path,
    images: &Path,
    out: &Path,
    opts: &PredictOptions,
) -> CliResult<usize> {
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    if opts.intermediate && !model.config.deep_supervision {
        return Err(Error::config(
            "net.deep_supervision",
            "intermediate predictions need deep supervision",
        )
        .into());
    }
    let mut resolved = model.config.to_key_values();
    resolved.set("predict.checkpoint", checkpoint.display());
    resolved.set("predict.images", images.display());
    resolved.set(
        "predict.masks",
        opts.masks
            .as_ref()
            .map(|m| m.display().to_string())
            .unwrap_or_default(),
    );
    resolved.set("predict.intermediate", opts.intermediate);
    write_resolved(out, &resolved, Some("focus-unet predict"))?;
    let (mask_dir, overlay_dir) = (out.join("masks"), out.join("overlays"));
    std::fs::create_dir_all(&mask_dir).map_err(Error::from)?;
    std::fs::create_dir_all(&overlay_dir).map_err(Error::from)?;

    let files = png_stems(images)?;
    for chunk in files.chunks(opts.batch_size.max(1)) {
        let originals = chunk
            .iter()
            .map(|(_, p)| load_rgb(p))
            .collect::<focus_unet::Result<Vec<_>>>()?;
        let inputs = chunk
            .iter()
            .zip(&originals)
            .map(|((id, _), img)| network_input(id, img, &model.config))
            .collect::<focus_unet::Result<Vec<_>>>()?;
        let batch = make_batch::<f32>(&inputs.iter().collect::<Vec<_>>())?;
        let outputs = model.predict(&batch.images)?;
        let finals = binarize(outputs.last().expect("final output"))?;
        let deepest = if opts.intermediate {
            Some(binarize(&outputs[0])?)
        } else {
            None
        };
        for (i, ((id, _), original)) in chunk.iter().zip(&originals).enumerate() {
            let (h, w) = (original.shape()[0], original.shape()[1]);
            let pred = resize_nearest(&finals[i], h, w);
            save_mask(&pred, &mask_dir.join(format!("{id}.png")))?;
            let truth = match &opts.masks {
                Some(dir) => Some(load_mask(&dir.join(format!("{id}.png")))?),
                None => None,
            };
            overlay(original, truth.as_ref(), &pred)?
                .save(overlay_dir.join(format!("{id}.png")))
                .map_err(Error::from)?;
            if let Some(d) = &deepest {
                let early = resize_nearest(&d[i], h, w);
                overlay(original, truth.as_ref(), &early)?
                    .save(overlay_dir.join(format!("{id}_intermediate.png")))
                    .map_err(Error::from)?;
            }
        }
    }
    println!("wrote {} masks to {}", files.len(), mask_dir.display());
    Ok(files.len())
}

// inspect-attention -----------------------------------------------------------

pub struct AttentionMap {
    pub level: usize,
    pub lambda: f64,
    pub path: PathBuf,
    pub mean: f64,
    pub max: f64,
}

fn lambda_label(l: f64) -> String {
    float_text(l).replace('.', "p")
}

/// Renders the combined coefficient map of each gate for every λ, after
/// checking that raising λ never raises a coefficient and keeps the argmax.
pub fn cmd_inspect_attention(
    checkpoint: &Path,
    image: &Path,
    lambdas: &[f64],
    levels: Option<&[usize]>,
    out: &Path,
) -> CliResult<Vec<AttentionMap>> {
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    if model.config.gate != GateType::Focus {
        return Err(Error::config("net.gate", "attention inspection needs focus gates").into());
    }
    if lambdas.is_empty() {
        return Err(Error::config("lambdas", "give at least one focal parameter").into());
    }
    let mut resolved = model.config.to_key_values();
    resolved.set("inspect.checkpoint", checkpoint.display());
    resolved.set("inspect.image", image.display());
    resolved.set(
        "inspect.lambdas",
        lambdas
            .iter()
            .map(|&l| float_text(l))
            .collect::<Vec<_>>()
            .join(","),
    );
    write_resolved(out, &resolved, Some("focus-unet inspect-attention"))?;

    let sample = network_input("inspect", &load_rgb(image)?, &model.config)?;
    let batch = make_batch::<f32>(&[&sample])?;
    // per λ: (level, coefficients)
    let mut maps: Vec<Vec<(usize, Tensor<f32>)>> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut g = Graph::new();
        let x = g.constant(batch.images.clone());
        let opts = GateOptions {
            lambda: Some(lambda),
            bypass: false,
        };
        let fwd = model.forward(&mut g, x, opts)?;
        maps.push(
            fwd.gates
                .iter()
                .map(|(l, o)| (*l, g.value(o.coefficients).clone()))
                .collect(),
        );
    }
    let all_levels: Vec<usize> = maps[0].iter().map(|m| m.0).collect();
    let chosen = levels
        .map(<[usize]>::to_vec)
        .unwrap_or_else(|| all_levels.clone());
    if let Some(bad) = chosen.iter().find(|l| !all_levels.contains(l)) {
        return Err(Error::config(
            "levels",
            format!("no gate at level {bad}; gates are at {all_levels:?}"),
        )
        .into());
    }

    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[a].total_cmp(&lambdas[b]));
    for (slot, &level) in all_levels.iter().enumerate() {
        let reference = &maps[order[0]][slot].1;
        let peak = reference
            .data()
            .iter()
            .enumerate()
            .fold(
                0,
                |best, (i, &v)| if v > reference.data()[best] { i } else { best },
            );
        for pair in order.windows(2) {
            let (lo, hi) = (&maps[pair[0]][slot].1, &maps[pair[1]][slot].1);
            if lo.data().iter().zip(hi.data()).any(|(a, b)| b > a) {
                return Err(CliError::Check(format!(
                    "level {level}: coefficients grew from λ={} to λ={}",
                    lambdas[pair[0]], lambdas[pair[1]]
                )));
            }
            let top = hi.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            if hi.data()[peak] != top {
                return Err(CliError::Check(format!(
                    "level {level}: argmax moved at λ={}",
                    lambdas[pair[1]]
                )));
            }
        }
    }

    let mut rendered = Vec::new();
    for (k, &lambda) in lambdas.iter().enumerate() {
        for (level, coeff) in &maps[k] {
            if !chosen.contains(level) {
                continue;
            }
            let (h, w, values) = channel_max(coeff)?;
            let path = out.join(format!(
                "attention_l{level}_lambda{}.png",
                lambda_label(lambda)
            ));
            heatmap(h, w, &values).save(&path).map_err(Error::from)?;
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let max = values.iter().copied().fold(0.0, f64::max);
            println!(
                "level {level} λ={lambda}: mean {mean:.4} max {max:.4} -> {}",
                path.display()
            );
            rendered.push(AttentionMap {
                level: *level,
                lambda,
                path,
                mean,
                max,
            });
        }
    }
    Ok(rendered)
}

// gradcheck -------------------------------------------------------------------

pub fn cmd_gradcheck(
    trials: usize,
    seed: u64,
    filter: Option<&str>,
    out: Option<&Path>,
) -> CliResult<Vec<SuiteResult>> {
    let results = run_suite(trials, seed, filter)?;
    if results.is_empty() {
        return Err(Error::config("filter", "no gradient check matches").into());
    }
    let mut csv = String::from("case,trials,max_rel_error,checked,excluded,passed\n");
    for r in &results {
        println!(
            "{:32} max rel. err {:10.3e}  checked {:6}  skipped {:4}  {}",
            r.name,
            r.report.max_rel_error,
            r.report.checked,
            r.report.excluded,
            if r.passed() { "ok" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "{},{},{:e},{},{},{}\n",
            r.name,
            r.trials,
            r.report.max_rel_error,
            r.report.checked,
            r.report.excluded,
            r.passed()
        ));
    }
    if let Some(dir) = out {
        let mut kv = KeyValues::new();
        kv.set("gradcheck.trials", trials);
        kv.set("gradcheck.seed", seed);
        kv.set("gradcheck.filter", filter.unwrap_or(""));
        write_resolved(dir, &kv, Some("focus-unet gradcheck"))?;
        std::fs::write(dir.join("gradcheck.csv"), csv).map_err(Error::from)?;
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name)
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Check(format!(
            "{} of {} gradient checks exceed {SUITE_TOLERANCE:e}: {failed:?}",
            failed.len(),
            results.len()
        )));
    }
    println!(
        "all {} gradient checks pass (tolerance {SUITE_TOLERANCE:e})",
        results.len()
    );
    Ok(results)
}

// synth -----------------------------------------------------------------------

pub fn cmd_synth(n: usize, height: usize, width: usize, seed: u64, out: &Path) -> CliResult<()> {
    if n == 0 || height < 8 || width < 8 {
        return Err(Error::config("synth", "need n >= 1 and images of at least 8x8").into());
    }
    let samples = synth_polyp_dataset(n, height, width, seed);
    save_dataset(&samples, out)?;
    let mut kv = KeyValues::new();
    kv.set("synth.n", n);
    kv.set("synth.height", height);
    kv.set("synth.width", width);
    kv.set("synth.seed", seed);
    write_resolved(out, &kv, Some("focus-unet synth"))?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

// ablate ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub gates: Vec<GateType>,
    /// Only varied for focus gates.
    pub lambdas: Vec<f64>,
    pub losses: Vec<LossKind>,
    pub short_skips: Vec<bool>,
    pub deep_supervision: Vec<bool>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            gates: vec![GateType::None, GateType::Additive, GateType::Focus],
            lambdas: vec![1.0, 1.25, 1.5, 2.0, 3.0],
            losses: vec![LossKind::DiceCe, LossKind::HybridFocal],
            short_skips: vec![false, true],
            deep_supervision: vec![false, true],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub gate: GateType,
    pub lambda: Option<f64>,
    pub loss: LossKind,
    pub short_skips: bool,
    pub deep_supervision: bool,
}

impl Variant {
    pub fn model_name(&self) -> &'static str {
        match self.gate {
            GateType::None => "U-Net",
            GateType::Additive => "Attention U-Net",
            GateType::Focus => "Focus U-Net",
        }
    }

    pub fn slug(&self) -> String {
        let lambda = self
            .lambda
            .map(|l| format!("_l{}", lambda_label(l)))
            .unwrap_or_default();
        format!(
            "{}{lambda}_{}_ss{}_ds{}",
            self.gate.as_str(),
            self.loss.as_str(),
            self.short_skips as u8,
            self.deep_supervision as u8
        )
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.net.gate = self.gate;
        if let Some(l) = self.lambda {
            cfg.net.focal_lambda = l;
        }
        cfg.net.short_skips = self.short_skips;
        cfg.net.deep_supervision = self.deep_supervision;
        cfg.train.loss = self.loss;
        cfg
    }
}

impl AblationGrid {
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for &gate in &self.gates {
            let lambdas: Vec<Option<f64>> = if gate == GateType::Focus {
                self.lambdas.iter().map(|&l| Some(l)).collect()
            } else {
                vec![None]
            };
            for &lambda in &lambdas {
                for &loss in &self.losses {
                    for &short_skips in &self.short_skips {
                        for &deep_supervision in &self.deep_supervision {
                            out.push(Variant {
                                gate,
                                lambda,
                                loss,
                                short_skips,
                                deep_supervision,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

pub const ABLATION_HEADER: &str =
    "model,gate,loss,focal_lambda,short_skips,deep_supervision,folds,\
mdsc,mdsc_std,miou,miou_std,recall,recall_std,precision,precision_std";

pub fn ablation_row(v: &Variant, s: &FoldSummary) -> String {
    let loss = match v.loss {
        LossKind::DiceCe => "DSC+CE",
        LossKind::HybridFocal => "HFL",
    };
    let lambda = v.lambda.map(float_text).unwrap_or_else(|| "-".into());
    format!(
        "{},{},{loss},{lambda},{},{},{},{},{},{},{},{},{},{},{}",
        v.model_name(),
        v.gate.as_str(),
        v.short_skips,
        v.deep_supervision,
        s.folds,
        s.mean.dsc,
        s.std.dsc,
        s.mean.iou,
        s.std.iou,
        s.mean.recall,
        s.std.recall,
        s.mean.precision,
        s.std.precision
    )
}

/// Trains every grid variant with the base protocol and writes
/// `ablation.csv`, one row per variant.
pub fn cmd_ablate(base: &RunConfig, grid: &AblationGrid) -> CliResult<Vec<(Variant, FoldSummary)>> {
    let variants = grid.variants();
    if variants.is_empty() {
        return Err(Error::config("grid", "the ablation grid is empty").into());
    }
    let out = &base.out_dir;
    let mut kv = base.to_key_values();
    kv.set(
        "ablate.variants",
        variants
            .iter()
            .map(Variant::slug)
            .collect::<Vec<_>>()
            .join(","),
    );
    write_resolved(out, &kv, Some("focus-unet ablate"))?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut rows = Vec::new();
    for v in variants {
        let cfg = v.apply(base);
        cfg.validate()?;
        let dir = out.join("variants").join(v.slug());
        cfg.write_resolved(&dir)?;
        let results = run_protocol(&cfg, &dir)?;
        let summary = write_summary(&results, &dir)?;
        println!(
            "{:40} mDSC {} mIoU {} recall {} precision {}",
            v.slug(),
            summary.cell(|s| s.dsc),
            summary.cell(|s| s.iou),
            summary.cell(|s| s.recall),
            summary.cell(|s| s.precision)
        );
        csv.push_str(&ablation_row(&v, &summary));
        csv.push('\n');
        // Rewritten after every variant so partial grids are kept.
        std::fs::write(out.join("ablation.csv"), &csv).map_err(Error::from)?;
        rows.push((v, summary));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_size() {
        let v = AblationGrid::default().variants();
        // (1 + 1 + 5 λ) gate settings × 2 losses × 2 × 2.
        assert_eq!(v.len(), 7 * 8);
        let slugs: HashSet<String> = v.iter().map(Variant::slug).collect();
        assert_eq!(slugs.len(), v.len());
    }

    #[test]
    fn row_matches_header() {
        let v = Variant {
            gate: GateType::Focus,
            lambda: Some(1.25),
            loss: LossKind::HybridFocal,
            short_skips: true,
            deep_supervision: true,
        };
        let s = summarise_folds(&[Scores::from_counts(&Default::default())]);
        let row = ablation_row(&v, &s);
        assert_eq!(row.split(',').count(), ABLATION_HEADER.split(',').count());
        assert!(row.starts_with("Focus U-Net,focus,HFL,1.25,true,true,1,"));
        assert_eq!(v.slug(), "focus_l1p25_hfl_ss1_ds1");
    }

    #[test]
    fn exit_codes_are_distinct_per_class() {
        let codes = [
            exit_code(&Error::config("x", "y").into()),
            exit_code(&Error::MissingFile("a".into()).into()),
            exit_code(&Error::BadMagic.into()),
            exit_code(&Error::Diverged { epoch: 1, batch: 0 }.into()),
            exit_code(&CliError::Check("x".into())),
        ];
        let unique: HashSet<u8> = codes.iter().copied().collect();
        assert_eq!(unique.len(), codes.len());
        assert!(!codes.contains(&0));
    }
}
