//! SGD with Nesterov momentum under a polynomial learning-rate decay, with
//! best-validation-loss model selection.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::GateOptions;
use crate::config::{float_text, KeyValues};
use crate::data::{augment, make_batch, AugmentationConfig, Sample};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, ParamStore};
use crate::losses::{LossConfig, LossKind};
use crate::metrics::{mean_scores, score_batch, Scores};
use crate::model::{aggregate_supervised_loss, FocusUNet};
use crate::nn::derive_seed;
use crate::tensor::{Real, Tensor};

pub const POLY_POWER: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub loss_config: LossConfig,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.99,
            epochs: 30,
            batch_size: 4,
            poly_power: POLY_POWER,
            seed: 0,
            loss: LossKind::HybridFocal,
            loss_config: LossConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 22] = [
        "train.lr0",
        "train.momentum",
        "train.epochs",
        "train.batch_size",
        "train.poly_power",
        "train.seed",
        "train.loss",
        "loss.tversky_alpha",
        "loss.tversky_beta",
        "loss.focal_alpha",
        "loss.focal_gamma",
        "loss.ftl_gamma",
        "loss.epsilon",
        "aug.scale_min",
        "aug.scale_max",
        "aug.rotation_deg",
        "aug.elastic_alpha",
        "aug.elastic_sigma",
        "aug.mirror_prob",
        "aug.gamma_min",
        "aug.gamma_max",
        "aug.apply_prob",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config("train.lr0", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::config("train.poly_power", "must be > 0"));
        }
        self.loss_config.validate()?;
        self.augmentation.validate()
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let (l, a) = (&self.loss_config, &self.augmentation);
        kv.set("train.lr0", float_text(self.lr0));
        kv.set("train.momentum", float_text(self.momentum));
        kv.set("train.epochs", self.epochs);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.poly_power", float_text(self.poly_power));
        kv.set("train.seed", self.seed);
        kv.set("train.loss", self.loss.as_str());
        kv.set("loss.tversky_alpha", float_text(l.tversky_alpha));
        kv.set("loss.tversky_beta", float_text(l.tversky_beta));
        kv.set("loss.focal_alpha", float_text(l.focal_alpha));
        kv.set("loss.focal_gamma", float_text(l.focal_gamma));
        kv.set("loss.ftl_gamma", float_text(l.ftl_gamma));
        kv.set("loss.epsilon", float_text(l.epsilon));
        kv.set("aug.scale_min", float_text(a.scale_range.0));
        kv.set("aug.scale_max", float_text(a.scale_range.1));
        kv.set("aug.rotation_deg", float_text(a.rotation_deg));
        kv.set("aug.elastic_alpha", float_text(a.elastic_alpha));
        kv.set("aug.elastic_sigma", float_text(a.elastic_sigma));
        kv.set("aug.mirror_prob", float_text(a.mirror_prob));
        kv.set("aug.gamma_min", float_text(a.gamma_range.0));
        kv.set("aug.gamma_max", float_text(a.gamma_range.1));
        kv.set("aug.apply_prob", float_text(a.apply_prob));
        kv
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read("train.lr0", &mut self.lr0)?;
        kv.read("train.momentum", &mut self.momentum)?;
        kv.read("train.epochs", &mut self.epochs)?;
        kv.read("train.batch_size", &mut self.batch_size)?;
        kv.read("train.poly_power", &mut self.poly_power)?;
        kv.read("train.seed", &mut self.seed)?;
        kv.read("train.loss", &mut self.loss)?;
        let l = &mut self.loss_config;
        kv.read("loss.tversky_alpha", &mut l.tversky_alpha)?;
        kv.read("loss.tversky_beta", &mut l.tversky_beta)?;
        kv.read("loss.focal_alpha", &mut l.focal_alpha)?;
        kv.read("loss.focal_gamma", &mut l.focal_gamma)?;
        kv.read("loss.ftl_gamma", &mut l.ftl_gamma)?;
        kv.read("loss.epsilon", &mut l.epsilon)?;
        let a = &mut self.augmentation;
        kv.read("aug.scale_min", &mut a.scale_range.0)?;
        kv.read("aug.scale_max", &mut a.scale_range.1)?;
        kv.read("aug.rotation_deg", &mut a.rotation_deg)?;
        kv.read("aug.elastic_alpha", &mut a.elastic_alpha)?;
        kv.read("aug.elastic_sigma", &mut a.elastic_sigma)?;
        kv.read("aug.mirror_prob", &mut a.mirror_prob)?;
        kv.read("aug.gamma_min", &mut a.gamma_range.0)?;
        kv.read("aug.gamma_max", &mut a.gamma_range.1)?;
        kv.read("aug.apply_prob", &mut a.apply_prob)?;
        Ok(())
    }
}

/// `lr0 · (1 - epoch / epoch_max)^0.9`, zero from `epoch_max` on.
pub fn poly_lr(epoch: usize, epoch_max: usize, lr0: f64) -> f64 {
    poly_lr_with_power(epoch, epoch_max, lr0, POLY_POWER)
}

pub fn poly_lr_with_power(epoch: usize, epoch_max: usize, lr0: f64, power: f64) -> f64 {
    if epoch >= epoch_max {
        return 0.0;
    }
    lr0 * (1.0 - epoch as f64 / epoch_max as f64).powf(power)
}

/// Per-parameter velocities, aligned with the store's order.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real> {
    pub velocity: Vec<(String, Tensor<T>)>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        OptimizerState {
            velocity: params
                .iter()
                .map(|p| (p.name.clone(), Tensor::zeros(p.value.shape().to_vec())))
                .collect(),
        }
    }
}

/// One Nesterov momentum step, in the form that needs no lookahead
/// gradient:
///
/// `v ← μ·v − lr·g`, then `p ← p + μ·v − lr·g`.
///
/// With `μ = 0` this is plain SGD. Frozen parameters are left alone.
pub fn nesterov_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for (p, (vname, v)) in params.iter_mut().zip(state.velocity.iter_mut()) {
        if *vname != p.name || v.shape() != p.value.shape() {
            return Err(Error::Incompatible(format!(
                "optimizer state does not match parameter {}",
                p.name
            )));
        }
        if !p.trainable {
            continue;
        }
        let g = grads
            .get(&p.name)
            .ok_or_else(|| Error::UnknownParameter(p.name.clone()))?;
        if g.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "nesterov_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for ((pv, vv), &gv) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(g.data())
        {
            let step = lr * gv;
            *vv = mu * *vv - step;
            *pv = *pv + mu * *vv - step;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mdsc: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_loss,val_mdsc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?}",
            self.epoch, self.lr, self.train_loss, self.val_loss, self.val_mdsc
        )
    }
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&e.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n.div_ceil(size)).map(move |b| b * size..((b + 1) * size).min(n))
}

/// Weighted aggregate loss and per-image scores of the final output over
/// `samples`, without augmentation.
pub fn evaluate_loss(
    model: &FocusUNet<f32>,
    samples: &[Sample],
    batch_size: usize,
    loss: LossKind,
    loss_config: &LossConfig,
) -> Result<(f64, Vec<Scores>)> {
    if samples.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut total = 0.0;
    let mut scores = Vec::with_capacity(samples.len());
    for r in batches(samples.len(), batch_size.max(1)) {
        let refs: Vec<&Sample> = samples[r.clone()].iter().collect();
        let batch = make_batch::<f32>(&refs)?;
        let mut g = Graph::new();
        let x = g.constant(batch.images);
        let t = g.constant(batch.targets);
        let out = model.forward(&mut g, x, GateOptions::default())?;
        let l = aggregate_supervised_loss(&mut g, &out.outputs, t, loss, loss_config)?;
        total += g.value(l).item()?.as_f64() * r.len() as f64;
        scores.extend(score_batch(g.value(out.final_output()), &batch.masks)?);
    }
    Ok((total / samples.len() as f64, scores))
}

/// Per-image scores of the final output.
pub fn evaluate(
    model: &FocusUNet<f32>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<Scores>> {
    let mut scores = Vec::with_capacity(samples.len());
    for r in batches(samples.len(), batch_size.max(1)) {
        let refs: Vec<&Sample> = samples[r].iter().collect();
        let batch = make_batch::<f32>(&refs)?;
        let out = model.predict(&batch.images)?;
        scores.extend(score_batch(
            out.last().expect("final output"),
            &batch.masks,
        )?);
    }
    Ok(scores)
}

/// Trains `model` in place and returns the best checkpoint with the log.
///
/// Each epoch shuffles the training set, augments every sample with a seed
/// derived from `(seed, epoch, id)`, and takes one Nesterov step per
/// mini-batch on the aggregate supervised loss. The learning rate is
/// constant within an epoch. The checkpoint is replaced only on a strict
/// improvement of the validation loss.
pub fn train(
    model: &mut FocusUNet<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut state = OptimizerState::new(&model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 0..cfg.epochs {
        let lr = poly_lr_with_power(epoch, cfg.epochs, cfg.lr0, cfg.poly_power);
        order.shuffle(&mut shuffle_rng);
        let aug_seed = derive_seed(cfg.seed, &format!("augment/{epoch}"));
        let mut loss_sum = 0.0;
        for (b, r) in batches(order.len(), cfg.batch_size).enumerate() {
            let augmented: Vec<Sample> = order[r.clone()]
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(aug_seed, &s.id));
                    augment(s, &cfg.augmentation, &mut rng)
                })
                .collect();
            let refs: Vec<&Sample> = augmented.iter().collect();
            let batch = make_batch::<f32>(&refs)?;
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                },
                other => other,
            };
            let mut g = Graph::new();
            let x = g.input(batch.images);
            let t = g.constant(batch.targets);
            let out = model
                .forward(&mut g, x, GateOptions::default())
                .map_err(diverged)?;
            let loss =
                aggregate_supervised_loss(&mut g, &out.outputs, t, cfg.loss, &cfg.loss_config)
                    .map_err(diverged)?;
            let lv = g.value(loss).item()?.as_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                });
            }
            let grads = g.backward_params(loss, &model.params).map_err(diverged)?;
            nesterov_step(&mut model.params, &grads, &mut state, lr, cfg.momentum)?;
            loss_sum += lv * r.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (val_loss, scores) =
            evaluate_loss(model, val_set, cfg.batch_size, cfg.loss, &cfg.loss_config).map_err(
                |e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        epoch: epoch + 1,
                        batch: usize::MAX,
                    },
                    other => other,
                },
            )?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                batch: usize::MAX,
            });
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss,
            val_loss,
            val_mdsc: mean_scores(&scores).dsc,
        };
        log.push(entry);
        if best.as_ref().is_none_or(|c| val_loss < c.best_val_loss) {
            best = Some(Checkpoint {
                config: model.config.clone(),
                params: model.params.clone(),
                epoch: epoch + 1,
                best_val_loss: val_loss,
            });
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        log,
    })
}
