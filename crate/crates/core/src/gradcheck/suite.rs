//! The standard gradient-check suite: every differentiable op, every loss,
//! the attention modules and gates, and two small end-to-end networks, each
//! checked over several random trials in 64-bit.
//!
//! Non-scalar outputs are reduced with a fixed random weighting,
//! `Σ y ⊙ r`, so every output element contributes a distinct gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_check_params, GradCheckReport, DEFAULT_STEP};
use crate::attention::{
    focal_filter, AdditiveGate, AttentionDims, ChannelAttention, FocusGate, GateOptions, GateType,
    SpatialAttention,
};
use crate::error::Result;
use crate::graph::{Graph, ParamStore, Var};
use crate::losses::{self, LossConfig, LossKind};
use crate::model::{aggregate_supervised_loss, ConvBlock, FocusUNet, NetworkConfig};
use crate::nn::{Padding, PoolKind};
use crate::tensor::Tensor;

/// Relative error bound every case must satisfy.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Step for whole-network cases. Many network weights have gradients near
/// 1e-7, where the round-off of a 1e-5 step on an O(1) loss (about 1e-11)
/// is already a 1e-4 relative error; a larger step keeps that noise well
/// below tolerance while the truncation error stays negligible.
pub const NETWORK_STEP: f64 = 1e-4;

type CaseFn = fn(u64) -> Result<GradCheckReport>;

pub struct SuiteCase {
    pub name: &'static str,
    run: CaseFn,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub trials: usize,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < SUITE_TOLERANCE && self.report.checked > 0
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random values of magnitude in `[lo, hi]` with random sign.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t).expect("unique names");
    }
    s
}

/// `Σ y ⊙ r` with `r` drawn from a fixed seed, identical on every call.
fn weighted(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn p(g: &mut Graph<f64>, s: &ParamStore<f64>, name: &str) -> Result<Var> {
    g.param_named(s, name)
}

fn full<F>(s: &ParamStore<f64>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    finite_diff_check_params(f, s, DEFAULT_STEP, None)
}

fn sampled<F>(s: &ParamStore<f64>, count: usize, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    finite_diff_check_params(f, s, DEFAULT_STEP, Some((count, seed)))
}

fn binary_case(
    seed: u64,
    op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
    positive_rhs: bool,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = if positive_rhs {
        rand_tensor(&mut rng, &[1, 3, 1], 0.5, 2.0)
    } else {
        rand_tensor(&mut rng, &[1, 3, 1], -1.0, 1.0)
    };
    let s = store(vec![("a", a), ("b", b)]);
    full(&s, move |g, s| {
        let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
        let y = op(g, a, b)?;
        weighted(g, y)
    })
}

fn unary_case(
    seed: u64,
    lo: f64,
    hi: f64,
    op: fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = store(vec![("x", rand_tensor(&mut rng, &[2, 3, 5], lo, hi))]);
    full(&s, move |g, s| {
        let x = p(g, s, "x")?;
        let y = op(g, x)?;
        weighted(g, y)
    })
}

fn map_case(
    seed: u64,
    shape: &[usize],
    op: fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = store(vec![("x", rand_tensor(&mut rng, shape, -1.0, 1.0))]);
    full(&s, move |g, s| {
        let x = p(g, s, "x")?;
        let y = op(g, x)?;
        weighted(g, y)
    })
}

fn conv_case(
    seed: u64,
    stride: usize,
    padding: Padding,
    transposed: bool,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, w) = if transposed {
        let k = if padding == Padding::Same {
            2 * stride
        } else {
            3
        };
        (
            rand_tensor(&mut rng, &[2, 3, 4, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[k, k, 2, 3], -1.0, 1.0),
        )
    } else {
        (
            rand_tensor(&mut rng, &[2, 5, 6, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 3, 3, 2], -1.0, 1.0),
        )
    };
    let b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    let s = store(vec![("x", x), ("w", w), ("b", b)]);
    full(&s, move |g, s| {
        let (x, w, b) = (p(g, s, "x")?, p(g, s, "w")?, p(g, s, "b")?);
        let y = if transposed {
            g.conv_transpose2d(x, w, Some(b), (stride, stride), padding)?
        } else {
            g.conv2d(x, w, Some(b), (stride, stride), padding)?
        };
        weighted(g, y)
    })
}

/// Random binary target with both classes present.
fn target(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = Tensor::from_fn(shape, |_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 });
    t.data_mut()[0] = 1.0;
    t.data_mut()[1] = 0.0;
    t
}

fn loss_case(
    seed: u64,
    f: fn(&mut Graph<f64>, Var, Var, &LossConfig) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = rand_tensor(&mut rng, &[2, 3, 4, 2], -2.0, 2.0);
    let t = target(&mut rng, &[2, 3, 4, 1]);
    let s = store(vec![("logits", logits)]);
    let cfg = LossConfig::default();
    full(&s, move |g, s| {
        let l = p(g, s, "logits")?;
        let pred = g.softmax(l)?;
        let tv = g.constant(t.clone());
        f(g, pred, tv, &cfg)
    })
}

/// Replaces every bias with a random non-zero value so no unit sits idle.
fn randomise_biases(s: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for prm in s.iter_mut() {
        if prm.name.ends_with("/b") {
            for v in prm.value.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
}

fn gate_case(seed: u64, gate: GateType) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let dims = AttentionDims::new(4, 4, 8)?;
    let (focus, additive) = match gate {
        GateType::Additive => (None, Some(AdditiveGate::new(&mut s, "ag", 4, 8, 4, seed)?)),
        _ => (
            Some(FocusGate::new(&mut s, "fg", &dims, 8, 4, 1.25, seed)?),
            None,
        ),
    };
    randomise_biases(&mut s, &mut rng);
    s.insert("skip", rand_tensor(&mut rng, &[1, 8, 8, 4], -1.0, 1.0))?;
    s.insert("gate", rand_tensor(&mut rng, &[1, 2, 2, 8], -1.0, 1.0))?;
    sampled(&s, 120, seed, move |g, s| {
        let (skip, gt) = (p(g, s, "skip")?, p(g, s, "gate")?);
        let out = match (&focus, &additive) {
            (Some(fg), _) => fg.forward(g, s, skip, gt, GateOptions::default())?,
            (None, Some(ag)) => ag.forward(g, s, skip, gt)?,
            (None, None) => unreachable!(),
        };
        weighted(g, out.output)
    })
}

fn attention_case(seed: u64, spatial: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let ca = ChannelAttention::new(&mut s, "ca", 6, seed)?;
    let sa = SpatialAttention::new(&mut s, "sa", &AttentionDims::new(6, 3, 12)?, seed)?;
    s.insert("x", rand_tensor(&mut rng, &[2, 5, 5, 6], -1.0, 1.0))?;
    full(&s, move |g, s| {
        let x = p(g, s, "x")?;
        let y = if spatial {
            sa.forward(g, s, x)?
        } else {
            ca.forward(g, s, x)?
        };
        weighted(g, y)
    })
}

fn conv_block_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let block = ConvBlock::new(&mut s, "blk", 3, 4, true, seed)?;
    randomise_biases(&mut s, &mut rng);
    s.insert("x", rand_tensor(&mut rng, &[1, 6, 6, 3], -1.0, 1.0))?;
    sampled(&s, 150, seed, move |g, s| {
        let x = p(g, s, "x")?;
        let y = block.forward(g, s, x)?;
        weighted(g, y)
    })
}

fn network_case(seed: u64, config: NetworkConfig, loss: LossKind) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FocusUNet::<f64>::build(config.clone(), seed)?;
    randomise_biases(&mut model.params, &mut rng);
    let image = rand_tensor(&mut rng, &[1, config.height, config.width, 3], -1.0, 1.0);
    let t = target(&mut rng, &[1, config.height, config.width, 1]);
    let cfg = LossConfig::default();
    let params = model.params.clone();
    finite_diff_check_params(
        move |g, s| {
            let x = g.constant(image.clone());
            let out = model.forward_with(g, s, x, GateOptions::default())?;
            let tv = g.constant(t.clone());
            aggregate_supervised_loss(g, &out.outputs, tv, loss, &cfg)
        },
        &params,
        NETWORK_STEP,
        Some((60, seed)),
    )
}

macro_rules! case {
    ($name:expr, $f:expr) => {
        SuiteCase {
            name: $name,
            run: $f,
        }
    };
}

pub fn suite_cases() -> Vec<SuiteCase> {
    vec![
        case!("add", |s| binary_case(s, |g, a, b| g.add(a, b), false)),
        case!("sub", |s| binary_case(s, |g, a, b| g.sub(a, b), false)),
        case!("mul", |s| binary_case(s, |g, a, b| g.mul(a, b), false)),
        case!("div", |s| binary_case(s, |g, a, b| g.div(a, b), true)),
        case!("neg", |s| unary_case(s, -1.0, 1.0, |g, x| g.neg(x))),
        case!("add_scalar", |s| unary_case(s, -1.0, 1.0, |g, x| g
            .add_scalar(x, 0.7))),
        case!("mul_scalar", |s| unary_case(s, -1.0, 1.0, |g, x| g
            .mul_scalar(x, -1.3))),
        case!("rsub_scalar", |s| unary_case(s, -1.0, 1.0, |g, x| g
            .rsub_scalar(1.0, x))),
        case!("pow_scalar", |s| unary_case(s, 0.2, 2.0, |g, x| g
            .pow_scalar(x, 1.7))),
        case!("ln", |s| unary_case(s, 0.2, 2.0, |g, x| g.ln(x))),
        case!("exp", |s| unary_case(s, -1.0, 1.0, |g, x| g.exp(x))),
        case!("relu", |s| unary_case(s, -1.0, 1.0, |g, x| g.relu(x))),
        case!("sigmoid", |s| unary_case(s, -3.0, 3.0, |g, x| g.sigmoid(x))),
        case!("clamp", |s| unary_case(s, -1.0, 1.0, |g, x| g
            .clamp(x, -0.5, 0.5))),
        case!("softmax", |s| map_case(s, &[2, 3, 3, 4], |g, x| g
            .softmax(x))),
        case!("sum", |s| unary_case(s, -1.0, 1.0, |g, x| g.sum(x))),
        case!("mean", |s| unary_case(s, -1.0, 1.0, |g, x| g.mean(x))),
        case!("slice_channel", |s| map_case(s, &[2, 3, 3, 4], |g, x| g
            .slice_channel(x, 2))),
        case!("concat_channels", |s| map_case(s, &[2, 3, 3, 2], |g, x| {
            let e = g.exp(x)?;
            g.concat_channels(&[x, e, x])
        })),
        case!("conv2d_same", |s| conv_case(s, 1, Padding::Same, false)),
        case!("conv2d_stride2", |s| conv_case(s, 2, Padding::Same, false)),
        case!("conv2d_valid", |s| conv_case(s, 1, Padding::Valid, false)),
        case!("conv_transpose2d_same", |s| conv_case(
            s,
            2,
            Padding::Same,
            true
        )),
        case!("conv_transpose2d_valid", |s| conv_case(
            s,
            2,
            Padding::Valid,
            true
        )),
        case!("max_pool2d", |s| map_case(s, &[2, 4, 6, 3], |g, x| g
            .max_pool2d(x, 2))),
        case!("pool_spatial_avg", |s| map_case(
            s,
            &[2, 3, 4, 5],
            |g, x| g.pool_spatial(PoolKind::Avg, x)
        )),
        case!("pool_spatial_max", |s| map_case(
            s,
            &[2, 3, 4, 5],
            |g, x| g.pool_spatial(PoolKind::Max, x)
        )),
        case!("pool_channel_avg", |s| map_case(
            s,
            &[2, 3, 4, 5],
            |g, x| g.pool_channel(PoolKind::Avg, x)
        )),
        case!("pool_channel_max", |s| map_case(
            s,
            &[2, 3, 4, 5],
            |g, x| g.pool_channel(PoolKind::Max, x)
        )),
        case!("upsample_nearest", |s| map_case(
            s,
            &[1, 2, 3, 2],
            |g, x| g.upsample_nearest(x, 2)
        )),
        case!("conv1d_channels", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = store(vec![
                ("x", rand_tensor(&mut rng, &[2, 1, 1, 6], -1.0, 1.0)),
                ("w", rand_tensor(&mut rng, &[3], -1.0, 1.0)),
            ]);
            full(&s, |g, s| {
                let (x, w) = (p(g, s, "x")?, p(g, s, "w")?);
                let y = g.conv1d_channels(x, w)?;
                weighted(g, y)
            })
        }),
        case!("focal_filter", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = store(vec![(
                "x",
                rand_away_from_zero(&mut rng, &[2, 3, 3, 2], 0.1, 3.0),
            )]);
            full(&s, |g, s| {
                let x = p(g, s, "x")?;
                let c = g.sigmoid(x)?;
                let a = focal_filter(g, c, 1.25)?;
                let b = focal_filter(g, c, 3.0)?;
                let y = g.add(a, b)?;
                weighted(g, y)
            })
        }),
        case!("soft_dice", |s| loss_case(s, |g, p, t, c| {
            losses::soft_dice(g, p, t, c.epsilon)
        })),
        case!("dice_ce_loss", |s| loss_case(s, losses::dice_ce_loss)),
        case!("cross_entropy", |s| loss_case(s, |g, p, t, c| {
            losses::cross_entropy(g, p, t, c.epsilon)
        })),
        case!("weighted_cross_entropy", |s| loss_case(s, |g, p, t, c| {
            losses::weighted_cross_entropy(g, p, t, c.focal_alpha, c.epsilon)
        })),
        case!("tversky_index", |s| loss_case(s, |g, p, t, c| {
            losses::tversky_index(g, p, t, c.tversky_alpha, c.tversky_beta, c.epsilon)
        })),
        case!("tversky_loss", |s| loss_case(s, losses::tversky_loss)),
        case!("focal_tversky_loss", |s| loss_case(s, |g, p, t, c| {
            losses::focal_tversky_loss(g, p, t, c, c.ftl_gamma)
        })),
        case!("focal_loss", |s| loss_case(s, |g, p, t, c| {
            losses::focal_loss(g, p, t, c.focal_alpha, c.focal_gamma, c.epsilon)
        })),
        case!("hybrid_focal_loss", |s| loss_case(
            s,
            losses::hybrid_focal_loss
        )),
        case!("non_focal_loss", |s| loss_case(s, losses::non_focal_loss)),
        case!("channel_attention", |s| attention_case(s, false)),
        case!("spatial_attention", |s| attention_case(s, true)),
        case!("focus_gate", |s| gate_case(s, GateType::Focus)),
        case!("additive_gate", |s| gate_case(s, GateType::Additive)),
        case!("conv_block", conv_block_case),
        case!("network_d2_c4_hfl", |s| network_case(
            s,
            NetworkConfig {
                depth: 2,
                base_channels: 4,
                height: 16,
                width: 16,
                ..NetworkConfig::default()
            },
            LossKind::HybridFocal,
        )),
        case!("network_d3_deep_supervision", |s| network_case(
            s,
            NetworkConfig {
                depth: 3,
                base_channels: 2,
                height: 8,
                width: 8,
                ..NetworkConfig::default()
            },
            LossKind::HybridFocal,
        )),
        case!("network_d2_additive_dice_ce", |s| network_case(
            s,
            NetworkConfig {
                depth: 2,
                base_channels: 4,
                height: 8,
                width: 8,
                gate: GateType::Additive,
                ..NetworkConfig::default()
            },
            LossKind::DiceCe,
        )),
    ]
}

/// Runs every case whose name contains `filter` (all when `None`) for
/// `trials` random trials each.
pub fn run_suite(trials: usize, seed: u64, filter: Option<&str>) -> Result<Vec<SuiteResult>> {
    let mut results = Vec::new();
    for case in suite_cases() {
        if filter.is_some_and(|f| !case.name.contains(f)) {
            continue;
        }
        let mut report = GradCheckReport::default();
        for t in 0..trials {
            let trial_seed = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(t as u64 + 1);
            report = report.merge((case.run)(trial_seed)?);
        }
        results.push(SuiteResult {
            name: case.name,
            trials,
            report,
        });
    }
    Ok(results)
}
