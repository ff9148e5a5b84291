//! Trains a small Focus U-Net on synthetic data and reports test scores.
//!
//! `cargo run --release --example synthetic_run -- [epochs] [batch] [lr] [momentum]`

use std::time::Instant;

use focus_unet::data::{single_split, synth_polyp_dataset};
use focus_unet::metrics::mean_scores;
use focus_unet::model::{FocusUNet, NetworkConfig};
use focus_unet::trainer::{evaluate, train, TrainConfig};

fn main() -> focus_unet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let cfg = TrainConfig {
        epochs: arg(0, "30").parse().unwrap(),
        batch_size: arg(1, "4").parse().unwrap(),
        lr0: arg(2, "0.01").parse().unwrap(),
        momentum: arg(3, "0.99").parse().unwrap(),
        ..TrainConfig::default()
    };
    let net = NetworkConfig {
        depth: 3,
        base_channels: 8,
        height: 64,
        width: 64,
        ..NetworkConfig::default()
    };
    let all = synth_polyp_dataset(250, 64, 64, 7);
    let (train_pool, test) = all.split_at(200);
    let ids: Vec<String> = train_pool.iter().map(|s| s.id.clone()).collect();
    let plan = single_split(&ids, 0.1, 7)?;
    let (tr, va): (Vec<_>, Vec<_>) = train_pool
        .iter()
        .cloned()
        .partition(|s| plan.fold_of(&s.id) == Some(0));
    let mut model = FocusUNet::<f32>::build(net, 7)?;
    println!("parameters: {}", model.num_parameters());
    let start = Instant::now();
    let out = train(&mut model, &tr, &va, &cfg)?;
    for e in &out.log {
        println!("{} {:.3}s", e.csv_row(), start.elapsed().as_secs_f64());
    }
    let best = out.best.into_model()?;
    let s = mean_scores(&evaluate(&best, test, 8)?);
    println!("test {s:?} in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
