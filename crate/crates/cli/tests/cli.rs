use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use focus_unet::data::{load_dataset_dir, load_mask};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_focus-unet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, side: usize, seed: u64) -> PathBuf {
    let (n, side, seed) = (n.to_string(), side.to_string(), seed.to_string());
    ok(&[
        "synth",
        "--n",
        &n,
        "--height",
        &side,
        "--width",
        &side,
        "--seed",
        &seed,
        "--out",
        p(dir),
    ]);
    dir.to_path_buf()
}

const TINY: [&str; 12] = [
    "--set",
    "net.depth=2",
    "--set",
    "net.base_channels=4",
    "--set",
    "net.height=16",
    "--set",
    "net.width=16",
    "--set",
    "train.epochs=1",
    "--set",
    "train.momentum=0.9",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let data_set = format!("data.dir={}", p(data));
    let out_set = format!("out.dir={}", p(out));
    let mut args = vec![
        "--threads",
        "1",
        "train",
        "--set",
        &data_set,
        "--set",
        &out_set,
    ];
    args.extend(TINY);
    args.extend(extra);
    ok(&args)
}

fn png_count(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "png")
        })
        .count()
}

#[test]
fn synth_is_deterministic_and_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), 5, 32, 3);
    let b = synth(&tmp.path().join("b"), 5, 32, 3);
    assert_eq!(png_count(&a.join("images")), 5);
    assert_eq!(png_count(&a.join("masks")), 5);
    for i in 0..5 {
        let name = format!("synth_{i:04}.png");
        for sub in ["images", "masks"] {
            assert_eq!(
                std::fs::read(a.join(sub).join(&name)).unwrap(),
                std::fs::read(b.join(sub).join(&name)).unwrap()
            );
        }
        let raw = image::open(a.join("masks").join(&name))
            .unwrap()
            .into_luma8();
        assert!(raw.pixels().all(|px| px.0[0] == 0 || px.0[0] == 255));
    }
    assert!(a.join("resolved.cfg").is_file());
}

#[test]
fn single_split_training_reproduces_from_its_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("data"), 12, 16, 1);
    let first = tmp.path().join("first");
    train(&data, &first, &[]);
    for f in [
        "model.ckpt",
        "log.csv",
        "summary.csv",
        "summary.json",
        "test_scores.csv",
        "resolved.cfg",
    ] {
        assert!(first.join(f).is_file(), "missing {f}");
    }
    assert_eq!(
        std::fs::read_to_string(first.join("log.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let again = tmp.path().join("again");
    let cfg = first.join("resolved.cfg");
    let out_set = format!("out.dir={}", p(&again));
    ok(&[
        "--threads",
        "1",
        "train",
        "--config",
        p(&cfg),
        "--set",
        &out_set,
    ]);
    for f in ["model.ckpt", "log.csv", "test_scores.csv"] {
        assert_eq!(
            std::fs::read(first.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn kfold_training_emits_one_checkpoint_per_fold() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("data"), 50, 16, 2);
    let out = tmp.path().join("run");
    let stdout = train(
        &data,
        &out,
        &["--set", "data.split=kfold", "--set", "data.folds=5"],
    );
    for i in 0..5 {
        assert!(out.join(format!("fold{i}")).join("model.ckpt").is_file());
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 5 + 2);
    assert!(stdout.contains("±"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["folds"].as_array().unwrap().len(), 5);
    assert_eq!(json["summary"]["folds"], 5);
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--set", "net.colour=red"]), 2);
    assert_eq!(
        code(&[
            "train",
            "--set",
            "train.momentum=1.0",
            "--set",
            "data.dir=x"
        ]),
        2
    );
    assert_eq!(code(&["train"]), 2);
    let missing = format!("data.dir={}", p(&tmp.path().join("nothing")));
    assert_eq!(code(&["train", "--set", &missing]), 3);
    let bogus = tmp.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let data = synth(&tmp.path().join("data"), 2, 16, 0);
    let out = tmp.path().join("o");
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            p(&bogus),
            "--data",
            p(&data),
            "--out",
            p(&out)
        ]),
        4
    );
    assert_eq!(code(&["gradcheck", "--filter", "no_such_case"]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
}

#[test]
fn eval_of_ground_truth_and_combined_score() {
    let tmp = tempfile::tempdir().unwrap();
    let small = synth(&tmp.path().join("small"), 2, 16, 4);
    let large = synth(&tmp.path().join("large"), 6, 16, 5);
    // The ground-truth masks themselves as predictions: every metric is 1.
    let out = tmp.path().join("perfect");
    ok(&[
        "eval",
        "--predictions",
        p(&small.join("masks")),
        p(&large.join("masks")),
        "--data",
        p(&small),
        p(&large),
        "--out",
        p(&out),
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    for m in ["dsc", "iou", "recall", "precision"] {
        assert_eq!(json["combined"]["mean"][m], 1.0);
    }
    assert_eq!(json["combined"]["images"], 8);
    assert_eq!(
        std::fs::read_to_string(out.join("eval_large.csv"))
            .unwrap()
            .lines()
            .count(),
        7
    );

    // Empty predictions for the small dataset: combined mDSC = (2·0 + 6·1) / 8.
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    for s in load_dataset_dir(&small).unwrap() {
        focus_unet::data::save_mask(
            &focus_unet::metrics::Mask::zeros(16, 16),
            &empty.join(format!("{}.png", s.id)),
        )
        .unwrap();
    }
    let out = tmp.path().join("mixed");
    ok(&[
        "eval",
        "--predictions",
        p(&empty),
        p(&large.join("masks")),
        "--data",
        p(&small),
        p(&large),
        "--out",
        p(&out),
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["combined"]["mean"]["dsc"], 0.75);

    let hollow = tmp.path().join("hollow");
    std::fs::create_dir_all(hollow.join("images")).unwrap();
    assert_eq!(
        code(&[
            "eval",
            "--predictions",
            p(&empty),
            "--data",
            p(&hollow),
            "--out",
            p(&out)
        ]),
        3
    );
}

#[test]
fn predict_and_inspect_from_a_trained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("data"), 8, 16, 6);
    let run_dir = tmp.path().join("run");
    train(&data, &run_dir, &["--set", "net.depth=3"]);
    let ckpt = run_dir.join("model.ckpt");

    let out = tmp.path().join("eval");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&out),
    ]);
    assert!(stdout.contains("combined: 8 images"));

    // Inputs at a different size than the network: outputs keep the input size.
    let odd = synth(&tmp.path().join("odd"), 3, 24, 7);
    let pred = tmp.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--images",
        p(&odd.join("images")),
        "--masks",
        p(&odd.join("masks")),
        "--out",
        p(&pred),
        "--intermediate",
    ]);
    assert_eq!(png_count(&pred.join("masks")), 3);
    assert_eq!(png_count(&pred.join("overlays")), 6);
    let m = load_mask(&pred.join("masks").join("synth_0000.png")).unwrap();
    assert_eq!((m.height, m.width), (24, 24));
    let raw = image::open(pred.join("masks").join("synth_0001.png"))
        .unwrap()
        .into_luma8();
    assert!(raw.pixels().all(|px| px.0[0] == 0 || px.0[0] == 255));

    let plain = tmp.path().join("plain");
    ok(&[
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--images",
        p(&odd.join("images")),
        "--out",
        p(&plain),
    ]);
    assert_eq!(png_count(&plain.join("overlays")), 3);

    let maps = tmp.path().join("maps");
    let image = odd.join("images").join("synth_0000.png");
    let stdout = ok(&[
        "inspect-attention",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&image),
        "--lambdas",
        "1,3,1.25",
        "--out",
        p(&maps),
    ]);
    // Two gate levels × three focal parameters.
    assert_eq!(png_count(&maps), 6);
    assert_eq!(stdout.lines().count(), 6);
    let bright = |name: &str| -> u64 {
        image::open(maps.join(name))
            .unwrap()
            .into_luma8()
            .pixels()
            .map(|px| px.0[0] as u64)
            .sum()
    };
    assert!(bright("attention_l0_lambda3p0.png") <= bright("attention_l0_lambda1p0.png"));
    let only = tmp.path().join("only");
    ok(&[
        "inspect-attention",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&image),
        "--levels",
        "1",
        "--out",
        p(&only),
    ]);
    assert_eq!(png_count(&only), 4);
}

#[test]
fn ablation_grid_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("data"), 10, 16, 8);
    let out = tmp.path().join("ablate");
    let data_set = format!("data.dir={}", p(&data));
    let out_set = format!("out.dir={}", p(&out));
    let mut args = vec![
        "--threads",
        "1",
        "ablate",
        "--set",
        &data_set,
        "--set",
        &out_set,
    ];
    args.extend(TINY);
    args.extend([
        "--gates",
        "none,focus",
        "--lambdas",
        "1.25",
        "--losses",
        "hfl",
        "--short-skips",
        "true",
        "--deep-supervision",
        "false",
    ]);
    ok(&args);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0]
        .starts_with("model,gate,loss,focal_lambda,short_skips,deep_supervision,folds,mdsc"));
    assert!(lines[1].starts_with("U-Net,none,HFL,-,true,false,1,"));
    assert!(lines[2].starts_with("Focus U-Net,focus,HFL,1.25,true,false,1,"));
}

#[test]
fn gradcheck_subset_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&[
        "gradcheck",
        "--trials",
        "3",
        "--filter",
        "relu",
        "--out",
        p(tmp.path()),
    ]);
    assert!(stdout.contains("relu"));
    assert!(tmp.path().join("gradcheck.csv").is_file());
}
