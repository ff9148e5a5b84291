use std::collections::BTreeSet;

use focus_unet::data::{
    augment, kfold_split, load_dataset_dir, load_mask, load_png_pair, load_rgb, make_batch, resize,
    save_dataset, save_rgb, single_split, synth_polyp_dataset, zscore_normalize,
    AugmentationConfig, Mask, Sample,
};
use focus_unet::{Error, Tensor};
use image::{GrayImage, Luma, Rgba, RgbaImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn integer_sample(id: &str, h: usize, w: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::from_fn([h, w, 3], |_| rng.random_range(0..=255u8) as f32);
    let mask = Mask::new(
        h,
        w,
        (0..h * w).map(|_| rng.random_range(0..=1u8)).collect(),
    )
    .unwrap();
    Sample::new(id, image, mask).unwrap()
}

#[test]
fn png_dataset_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<Sample> = (0..3)
        .map(|i| integer_sample(&format!("s{i}"), 6, 9, i))
        .collect();
    save_dataset(&samples, dir.path()).unwrap();
    let back = load_dataset_dir(dir.path()).unwrap();
    assert_eq!(back, samples);
}

#[test]
fn load_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    assert!(matches!(load_rgb(&missing), Err(Error::MissingFile(_))));
    assert!(matches!(
        load_dataset_dir(dir.path()),
        Err(Error::MissingFile(_))
    ));

    let rgba = dir.path().join("rgba.png");
    RgbaImage::from_pixel(4, 4, Rgba([1, 2, 3, 255]))
        .save(&rgba)
        .unwrap();
    assert!(matches!(load_rgb(&rgba), Err(Error::NotRgb { .. })));

    let img = dir.path().join("img.png");
    save_rgb(&integer_sample("x", 4, 4, 0).image, &img).unwrap();
    let small = dir.path().join("small.png");
    GrayImage::new(3, 4).save(&small).unwrap();
    assert!(matches!(
        load_png_pair(&img, &small),
        Err(Error::DimensionMismatch {
            image: (4, 4),
            mask: (4, 3)
        })
    ));
}

#[test]
fn mask_threshold_is_above_127() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    let values = [0u8, 127, 128, 255];
    let mut img = GrayImage::new(4, 1);
    for (x, &v) in values.iter().enumerate() {
        img.put_pixel(x as u32, 0, Luma([v]));
    }
    img.save(&path).unwrap();
    assert_eq!(load_mask(&path).unwrap().data, vec![0, 0, 1, 1]);
}

#[test]
fn zscore_statistics() {
    let s = integer_sample("z", 10, 12, 3);
    let z = zscore_normalize(&s.image);
    let v = z.to_f64_vec();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-5);
    assert!((var - 1.0).abs() < 1e-4);
    let flat = zscore_normalize(&Tensor::full([2, 2, 3], 40.0f32));
    assert!(flat.data().iter().all(|&x| x == 0.0));
}

#[test]
fn batches_are_normalised_and_one_hot() {
    let a = integer_sample("a", 4, 4, 1);
    let b = integer_sample("b", 4, 4, 2);
    let batch = make_batch::<f32>(&[&a, &b]).unwrap();
    assert_eq!(batch.images.shape(), &[2, 4, 4, 3]);
    assert_eq!(
        batch.images.index_first(1).unwrap(),
        zscore_normalize(&b.image)
    );
    assert_eq!(batch.masks, vec![a.mask.clone(), b.mask.clone()]);
    let c = integer_sample("c", 4, 5, 2);
    assert!(make_batch::<f32>(&[&a, &c]).is_err());
}

#[test]
fn resize_keeps_masks_binary() {
    let s = integer_sample("r", 7, 5, 8);
    let r = resize(&s, 16, 12).unwrap();
    assert_eq!((r.height(), r.width()), (16, 12));
    assert!(r.mask.data.iter().all(|&v| v <= 1));
    assert!(r.image.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
}

#[test]
fn synthetic_data_is_reproducible() {
    let a = synth_polyp_dataset(6, 32, 32, 11);
    assert_eq!(a, synth_polyp_dataset(6, 32, 32, 11));
    assert_ne!(a, synth_polyp_dataset(6, 32, 32, 12));
    for s in &a {
        let frac = s.mask.count() as f64 / (32.0 * 32.0);
        assert!((0.02..=0.25).contains(&frac), "{} has {frac}", s.id);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn augmented_masks_stay_binary(seed in any::<u64>(), index in 0usize..1000) {
        let s = focus_unet::data::synth_sample(index, 24, 24, 5);
        let cfg = AugmentationConfig { apply_prob: 1.0, ..AugmentationConfig::default() };
        let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!((out.height(), out.width()), (24, 24));
        prop_assert!(out.mask.data.iter().all(|&v| v <= 1));
        prop_assert!(out.image.all_finite());
        let again = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out, again);
    }

    #[test]
    fn disabled_augmentation_is_identity(seed in any::<u64>()) {
        let s = focus_unet::data::synth_sample(3, 16, 16, 1);
        let out = augment(&s, &AugmentationConfig::disabled(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out, s);
    }

    #[test]
    fn kfold_partitions(n in 2usize..60, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let plan = kfold_split(&ids, k, seed).unwrap();
        prop_assert_eq!(&plan, &kfold_split(&ids, k, seed).unwrap());
        let mut seen = BTreeSet::new();
        for fold in &plan.folds {
            prop_assert!(fold.len() == n / k || fold.len() == n / k + 1);
            for id in fold {
                prop_assert!(seen.insert(id.clone()));
            }
        }
        prop_assert_eq!(seen.len(), n);
        for (train, test) in plan.partitions() {
            prop_assert_eq!(train.len() + test.len(), n);
            prop_assert!(train.iter().all(|id| !test.contains(id)));
        }
    }

    #[test]
    fn single_split_sizes(n in 2usize..100, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let plan = single_split(&ids, frac, seed).unwrap();
        let (train, test) = (&plan.folds[0], &plan.folds[1]);
        prop_assert_eq!(train.len() + test.len(), n);
        prop_assert!(!train.is_empty() && !test.is_empty());
        let mut all: Vec<&String> = train.iter().chain(test).collect();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
    }
}
