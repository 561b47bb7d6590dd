//! Trains the desk-scale ordinal model on freshly generated synthetic tiles
//! and compares it with predicting the mean height.
//!
//! cargo run --release --example desk_training -- [epochs] [patches_per_epoch] [ordinal|mcc|mse]

use std::time::Instant;

use ordsurf::synth::{generate_tile, SceneConfig};
use ordsurf::{train, DiscretizationScheme, HeadKind, NetConfig, OptimConfig, TilePair};

fn tiles(seed: u64, n: u64) -> Vec<TilePair> {
    let cfg = SceneConfig { seed, ..SceneConfig::default() };
    (0..n)
        .map(|i| {
            let (image, dsm) = generate_tile(&cfg, i).unwrap();
            TilePair::new(image, dsm).unwrap()
        })
        .collect()
}

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let optim = OptimConfig {
        epochs: args.first().copied().unwrap_or(10),
        patches_per_epoch: args.get(1).copied().unwrap_or(2000),
        ..OptimConfig::default()
    };
    let head = std::env::args().nth(3).map_or(Ok(HeadKind::Ordinal), |s| s.parse()).unwrap();
    let net = NetConfig { head, ..NetConfig::desk() };
    let scheme = DiscretizationScheme::sid(0.0, 40.0, net.k).unwrap();
    let (train_tiles, val_tiles) = (tiles(0, 200), tiles(1, 20));
    let start = Instant::now();
    let report = train(&train_tiles, &val_tiles, &net, &optim, &scheme, 0, |e| {
        println!(
            "epoch {:>2}  loss {:.4}  val rmse {:.3}  val rel {:.3}  ({:.0}s)",
            e.epoch,
            e.mean_loss,
            e.val_rmse,
            e.val_rel,
            start.elapsed().as_secs_f64()
        );
    })
    .unwrap();
    println!("first batch loss {:.4} (K ln 2 = {:.4})", report.first_batch_loss, net.k as f64 * 2f64.ln());
    println!("baseline rmse {:.3}", report.baseline_rmse);
}
