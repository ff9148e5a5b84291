//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! lines show up in `cargo test` output; exits non-zero if a gated check fails.

use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use focus_unet::attention::{
    adaptive_kernel_channel, adaptive_kernel_spatial, AttentionDims, FocusGate, GateOptions,
    GateType, KERNEL_B, KERNEL_GAMMA,
};
use focus_unet::data::{make_batch, single_split, synth_polyp_dataset, Sample};
use focus_unet::gradcheck::{run_suite, SUITE_TOLERANCE};
use focus_unet::losses::{self, LossConfig, LossKind};
use focus_unet::metrics::{confusion, dsc, iou, mean_scores, Mask, Scores};
use focus_unet::model::{deep_supervision_weight, FocusUNet, NetworkConfig};
use focus_unet::trainer::{evaluate, log_to_csv, poly_lr, train, Checkpoint, TrainConfig};
use focus_unet::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || {
        format!("{name} = {got}, expected {want} ± {tol}")
    })
}

// 1 --------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = run_suite(20, 2024, None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name)
        .collect();
    ensure(failed.is_empty(), || format!("failing cases: {failed:?}"))?;
    ensure(elapsed < Duration::from_secs(300), || {
        format!("took {elapsed:?}")
    })?;
    let worst = results
        .iter()
        .map(|r| r.report.max_rel_error)
        .fold(0.0, f64::max);
    Ok(format!(
        "{} cases x 20 trials, worst rel. err {worst:.2e} < {SUITE_TOLERANCE:e}, {:.1}s",
        results.len(),
        elapsed.as_secs_f64()
    ))
}

// 2 --------------------------------------------------------------------------

fn formula_fixtures() -> Outcome {
    let tol = 1e-9;
    let ck = |c| adaptive_kernel_channel(c, KERNEL_B, KERNEL_GAMMA);
    ensure(ck(32) == 7 && ck(64) == 9, || {
        format!("channel kernels {} {}", ck(32), ck(64))
    })?;
    let sk =
        |c, c0, cmax| adaptive_kernel_spatial(&AttentionDims::new(c, c0, cmax).unwrap()).unwrap();
    // Deepest layer (C = Cmax) and shallowest layer (C = C0) of a 512/32 network.
    ensure(sk(512, 32, 512) == 7 && sk(32, 32, 512) == 11, || {
        format!("spatial kernels {} {}", sk(512, 32, 512), sk(32, 32, 512))
    })?;
    for (s, w) in [(1, 0.5), (2, 0.0625), (4, 2f64.powi(-16))] {
        close(
            &format!("weight(s={s})"),
            deep_supervision_weight(s),
            w,
            tol,
        )?;
    }
    close("lr(0)", poly_lr(0, 100, 0.01), 0.01, tol)?;
    close(
        "lr(50)",
        poly_lr(50, 100, 0.01),
        0.01 * 0.5f64.powf(0.9),
        tol,
    )?;
    close("lr(50) rounded", poly_lr(50, 100, 0.01), 0.005359, 5e-7)?;
    close("lr(max)", poly_lr(100, 100, 0.01), 0.0, tol)?;
    Ok("kernels 7/9 and 7/11, weights {0.5, 0.0625, 2^-16}, lr {0.01, 0.005359, 0}".into())
}

// 3 --------------------------------------------------------------------------

fn loss_value(
    fg: &[f64],
    y: &[f64],
    f: impl FnOnce(&mut Graph<f64>, Var, Var) -> focus_unet::Result<Var>,
) -> f64 {
    let data: Vec<f64> = fg.iter().flat_map(|&p| [1.0 - p, p]).collect();
    let mut g = Graph::new();
    let p = g.constant(Tensor::new([1, 1, fg.len(), 2], data).unwrap());
    let t = g.constant(Tensor::from_f64([1, 1, y.len(), 1], y).unwrap());
    let v = f(&mut g, p, t).unwrap();
    g.value(v).item().unwrap()
}

fn loss_identities() -> Outcome {
    let cfg = LossConfig::default();
    let sym = LossConfig {
        tversky_alpha: 0.5,
        tversky_beta: 0.5,
        ..cfg
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = rng.random_range(2..50);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..=1u8) as f64).collect();
        let ti = loss_value(&p, &y, |g, a, b| {
            losses::tversky_index(g, a, b, 0.5, 0.5, cfg.epsilon)
        });
        let d = loss_value(&p, &y, |g, a, b| losses::soft_dice(g, a, b, cfg.epsilon));
        let tl = loss_value(&p, &y, |g, a, b| losses::tversky_loss(g, a, b, &sym));
        worst = worst.max((ti - d).abs()).max((tl - (1.0 - d)).abs());
        ensure(worst <= 1e-12, || {
            format!("case {case}: Tversky(0.5, 0.5) {ti} vs Dice {d}")
        })?;
        let ftl = loss_value(&p, &y, |g, a, b| {
            losses::focal_tversky_loss(g, a, b, &cfg, 1.0)
        });
        let tl = loss_value(&p, &y, |g, a, b| losses::tversky_loss(g, a, b, &cfg));
        ensure(ftl == tl.max(0.0), || {
            format!("case {case}: FTL(1) {ftl} vs Tversky {tl}")
        })?;
        let fl = loss_value(&p, &y, |g, a, b| {
            losses::focal_loss(g, a, b, cfg.focal_alpha, 0.0, cfg.epsilon)
        });
        let wce = loss_value(&p, &y, |g, a, b| {
            losses::weighted_cross_entropy(g, a, b, cfg.focal_alpha, cfg.epsilon)
        });
        ensure(fl == wce, || {
            format!("case {case}: FL(0) {fl} vs weighted CE {wce}")
        })?;
    }

    let y = [1.0, 0.0, 1.0, 0.0, 0.0];
    let p = y;
    let perfect = [
        (
            "dice+ce",
            loss_value(&p, &y, |g, a, b| losses::dice_ce_loss(g, a, b, &cfg)),
        ),
        (
            "tversky",
            loss_value(&p, &y, |g, a, b| losses::tversky_loss(g, a, b, &cfg)),
        ),
        (
            "ftl",
            loss_value(&p, &y, |g, a, b| {
                losses::focal_tversky_loss(g, a, b, &cfg, cfg.ftl_gamma)
            }),
        ),
        (
            "focal",
            loss_value(&p, &y, |g, a, b| {
                losses::focal_loss(g, a, b, cfg.focal_alpha, cfg.focal_gamma, cfg.epsilon)
            }),
        ),
        (
            "ce",
            loss_value(&p, &y, |g, a, b| {
                losses::cross_entropy(g, a, b, cfg.epsilon)
            }),
        ),
        (
            "hfl",
            loss_value(&p, &y, |g, a, b| losses::hybrid_focal_loss(g, a, b, &cfg)),
        ),
    ];
    for (name, v) in perfect {
        close(&format!("perfect {name}"), v, 0.0, 1e-5)?;
    }

    let (p, y) = ([0.8, 0.6, 0.2], [1.0, 1.0, 0.0]);
    let ti = loss_value(&p, &y, |g, a, b| {
        losses::tversky_index(g, a, b, 0.3, 0.7, cfg.epsilon)
    });
    let tl = loss_value(&p, &y, |g, a, b| losses::tversky_loss(g, a, b, &cfg));
    let ftl = loss_value(&p, &y, |g, a, b| {
        losses::focal_tversky_loss(g, a, b, &cfg, 0.75)
    });
    close("TI", ti, 0.7447, 1e-3)?;
    close("Tversky loss", tl, 0.2553, 1e-3)?;
    close("FTL", ftl, 0.359, 1e-3)?;
    Ok(format!(
        "100 random inputs (max |Tversky - Dice| {worst:.1e}), perfect predictions ~0, TI {ti:.4} TL {tl:.4} FTL {ftl:.4}"
    ))
}

// 4 --------------------------------------------------------------------------

fn brute_force(pred: &Mask, truth: &Mask) -> Scores {
    let (mut tp, mut fp, mut fn_) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..truth.height {
        for x in 0..truth.width {
            match (pred.get(y, x), truth.get(y, x)) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
    }
    let ratio = |n: f64, d: f64| if d == 0.0 { 1.0 } else { n / d };
    Scores {
        dsc: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        iou: ratio(tp, tp + fp + fn_),
        recall: ratio(tp, tp + fn_),
        precision: ratio(tp, tp + fp),
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..200 {
        // Vary the density so empty and full masks turn up too.
        let density: f64 = [0.0, 0.02, 0.3, 0.5, 0.8, 1.0][case % 6];
        let mut random = || {
            Mask::new(
                8,
                8,
                (0..64).map(|_| rng.random_bool(density) as u8).collect(),
            )
            .unwrap()
        };
        let (p, t) = (random(), random());
        let c = confusion(&p, &t).map_err(|e| e.to_string())?;
        let s = Scores::from_counts(&c);
        let o = brute_force(&p, &t);
        ensure(s == o, || format!("case {case}: {s:?} vs oracle {o:?}"))?;
        let (d, j) = (dsc(&c), iou(&c));
        close(
            &format!("case {case} DSC-IoU"),
            d,
            2.0 * j / (1.0 + j),
            1e-12,
        )?;
    }
    Ok("200 random 8x8 mask pairs match the per-pixel oracle exactly".into())
}

// 5 --------------------------------------------------------------------------

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn attention_properties() -> Outcome {
    let lambdas = [1.0, 1.25, 2.0, 3.0];
    let dims = AttentionDims::new(8, 8, 32).map_err(|e| e.to_string())?;
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
        let mut store = ParamStore::<f64>::new();
        let gate =
            FocusGate::new(&mut store, "g", &dims, 32, 4, 1.25, case).map_err(|e| e.to_string())?;
        let skip = Tensor::from_fn([1, 8, 8, 8], |_| rng.random_range(-2.0..2.0));
        let signal = Tensor::from_fn([1, 2, 2, 32], |_| rng.random_range(-2.0..2.0));
        let mut previous: Option<Vec<f64>> = None;
        let mut peak = None;
        for &lambda in &lambdas {
            let mut g = Graph::new();
            let s = g.constant(skip.clone());
            let q = g.constant(signal.clone());
            let opts = GateOptions {
                lambda: Some(lambda),
                bypass: false,
            };
            let out = gate
                .forward(&mut g, &store, s, q, opts)
                .map_err(|e| e.to_string())?;
            let attention = g.value(out.attention).to_f64_vec();
            let coeff = g.value(out.coefficients).to_f64_vec();
            ensure(
                attention
                    .iter()
                    .chain(&coeff)
                    .all(|v| (0.0..=1.0).contains(v)),
                || format!("case {case} λ={lambda}: coefficient outside [0, 1]"),
            )?;
            let m = argmax(&coeff);
            ensure(*peak.get_or_insert(m) == m, || {
                format!("case {case} λ={lambda}: argmax moved")
            })?;
            if let Some(prev) = &previous {
                ensure(coeff.iter().zip(prev).all(|(a, b)| a <= b), || {
                    format!("case {case} λ={lambda}: coefficients increased")
                })?;
            }
            previous = Some(coeff);
        }
    }
    Ok("50 gate inputs, λ in {1, 1.25, 2, 3}: in [0, 1], non-increasing, argmax fixed".into())
}

// 6 and 7 --------------------------------------------------------------------

const SIDE: usize = 64;
const DATA_SEED: u64 = 7;

struct Split {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

/// 250 synthetic samples: the first 200 train (10% of them held out for
/// checkpoint selection), the last 50 test.
fn synthetic_split() -> Split {
    let all = synth_polyp_dataset(250, SIDE, SIDE, DATA_SEED);
    let (pool, test) = all.split_at(200);
    let ids: Vec<String> = pool.iter().map(|s| s.id.clone()).collect();
    let plan = single_split(&ids, 0.1, DATA_SEED).unwrap();
    let (train, val) = pool
        .iter()
        .cloned()
        .partition(|s| plan.fold_of(&s.id) == Some(0));
    Split {
        train,
        val,
        test: test.to_vec(),
    }
}

fn focus_net() -> NetworkConfig {
    NetworkConfig {
        depth: 3,
        base_channels: 8,
        height: SIDE,
        width: SIDE,
        focal_lambda: 1.25,
        deep_supervision: true,
        gate: GateType::Focus,
        short_skips: true,
    }
}

fn plain_net() -> NetworkConfig {
    NetworkConfig {
        deep_supervision: false,
        gate: GateType::None,
        short_skips: false,
        ..focus_net()
    }
}

fn budget(loss: LossKind) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 4,
        loss,
        seed: DATA_SEED,
        ..TrainConfig::default()
    }
}

fn test_mdsc(net: NetworkConfig, loss: LossKind, split: &Split) -> Result<(f64, Duration), String> {
    let start = Instant::now();
    let mut model = FocusUNet::<f32>::build(net, DATA_SEED).map_err(|e| e.to_string())?;
    let out =
        train(&mut model, &split.train, &split.val, &budget(loss)).map_err(|e| e.to_string())?;
    let best = out.best.into_model().map_err(|e| e.to_string())?;
    let scores = evaluate(&best, &split.test, 8).map_err(|e| e.to_string())?;
    Ok((mean_scores(&scores).dsc, start.elapsed()))
}

fn synthetic_end_to_end(split: &Split, focus: &Cell<Option<f64>>) -> Outcome {
    let (mdsc, took) = test_mdsc(focus_net(), LossKind::HybridFocal, split)?;
    focus.set(Some(mdsc));
    ensure(mdsc >= 0.85, || format!("test mDSC {mdsc:.4} < 0.85"))?;
    Ok(format!(
        "D=3 C0=8 HFL, {} train / {} val / {} test, 30 epochs: test mDSC {mdsc:.4} >= 0.85 in {:.0}s",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        took.as_secs_f64()
    ))
}

/// Reported only: the direction is printed but never fails the run.
fn ablation(split: &Split, focus: Option<f64>) -> Outcome {
    let focus = match focus {
        Some(v) => v,
        None => test_mdsc(focus_net(), LossKind::HybridFocal, split)?.0,
    };
    let (plain, _) = test_mdsc(plain_net(), LossKind::DiceCe, split)?;
    let verdict = if focus >= plain {
        "holds"
    } else {
        "does not hold"
    };
    Ok(format!(
        "(reported) Focus U-Net + HFL {focus:.4} vs plain U-Net + DSC/CE {plain:.4}: direction {verdict}"
    ))
}

// 8 --------------------------------------------------------------------------

fn reproducibility() -> Outcome {
    let data = synth_polyp_dataset(12, 32, 32, 8);
    let net = NetworkConfig {
        height: 32,
        width: 32,
        ..focus_net()
    };
    let cfg = TrainConfig {
        epochs: 2,
        ..budget(LossKind::HybridFocal)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let run = || {
        pool.install(|| {
            let mut model = FocusUNet::<f32>::build(net.clone(), 1)?;
            train(&mut model, &data[..9], &data[9..], &cfg)
        })
        .map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    let (log_a, log_b) = (log_to_csv(&a.log), log_to_csv(&b.log));
    ensure(log_a == log_b, || "same-seed logs differ".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("best.ckpt");
    a.best.save(&path).map_err(|e| e.to_string())?;
    let written = std::fs::read(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure(loaded.to_bytes() == written, || {
        "checkpoint bytes change on reload".into()
    })?;
    ensure(a.best.to_bytes() == b.best.to_bytes(), || {
        "same-seed checkpoints differ".into()
    })?;

    let refs: Vec<&Sample> = data.iter().collect();
    let batch = make_batch::<f32>(&refs).map_err(|e| e.to_string())?;
    let before = a.best.into_model().and_then(|m| m.predict(&batch.images));
    let after = loaded.into_model().and_then(|m| m.predict(&batch.images));
    let (before, after) = (
        before.map_err(|e| e.to_string())?,
        after.map_err(|e| e.to_string())?,
    );
    let same_bits = before.iter().zip(&after).all(|(x, y)| {
        x.shape() == y.shape()
            && x.data()
                .iter()
                .zip(y.data())
                .all(|(u, v)| u.to_bits() == v.to_bits())
    });
    ensure(same_bits, || "reloaded forward differs".into())?;
    Ok(format!(
        "two 1-thread runs give identical logs ({} bytes), checkpoint reload is byte-identical ({} bytes), forward bit-exact",
        log_a.len(),
        written.len()
    ))
}

fn main() {
    let split = synthetic_split();
    let focus = Cell::new(None);
    let criteria: Vec<(usize, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        (1, Box::new(gradient_suite)),
        (2, Box::new(formula_fixtures)),
        (3, Box::new(loss_identities)),
        (4, Box::new(metric_oracle)),
        (5, Box::new(attention_properties)),
        (6, Box::new(|| synthetic_end_to_end(&split, &focus))),
        (7, Box::new(|| ablation(&split, focus.get()))),
        (8, Box::new(reproducibility)),
    ];
    let mut failed = Vec::new();
    for (n, check) in criteria {
        let line = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(detail)) => format!("criterion {n}: PASS {detail}"),
            Ok(Err(why)) => format!("criterion {n}: FAIL {why}"),
            Err(_) => format!("criterion {n}: FAIL panicked"),
        };
        // Criterion 7 is reported, never gated.
        if !line.contains(": PASS") && n != 7 {
            failed.push(n);
        }
        println!("{line}");
    }
    if failed.is_empty() {
        println!("acceptance: all gated criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
