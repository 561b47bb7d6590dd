//! Trains briefly on a handful of synthetic tiles, saves the checkpoint,
//! reloads it and predicts a full held-out tile patch by patch.
//!
//! cargo run --release --example predict_tile -- [out_dir]

use std::path::PathBuf;

use ordsurf::metrics::{evaluate, DEFAULT_EPSILON};
use ordsurf::predict::{predict_image, write_prediction};
use ordsurf::synth::{generate_tile, SceneConfig};
use ordsurf::{train, Checkpoint, DiscretizationScheme, Midpoint, NetConfig, OptimConfig, RasterGrid, TilePair};

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "predict_out".into()));
    let cfg = SceneConfig { tile_size: 160, ..SceneConfig::default() };
    let tiles: Vec<TilePair> = (0..12)
        .map(|i| {
            let (image, dsm) = generate_tile(&cfg, i).unwrap();
            TilePair::new(image, dsm).unwrap()
        })
        .collect();
    let net = NetConfig::desk();
    let optim = OptimConfig { epochs: 3, patches_per_epoch: 200, ..OptimConfig::default() };
    let scheme = DiscretizationScheme::sid(0.0, 40.0, net.k).unwrap();
    let report = train(&tiles[..10], &tiles[10..], &net, &optim, &scheme, 0, |e| {
        println!("epoch {} loss {:.3} val rmse {:.3}", e.epoch, e.mean_loss, e.val_rmse)
    })
    .unwrap();

    std::fs::create_dir_all(&out).unwrap();
    let path = out.join("model.ordn");
    report.checkpoint.save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    let model = ckpt.to_model().unwrap();

    let tile = &tiles[11];
    let pred = predict_image(&model, &ckpt.scheme, &tile.image, net.patch_size, 2, Midpoint::Geometric).unwrap();
    write_prediction(&pred, &out).unwrap();
    // the stitched surface is relative; align its mean with the truth before scoring
    let stitched = &pred.stitched.raster;
    let n = stitched.data().len() as f64;
    let offset = tile.dsm.data().iter().zip(stitched.data()).map(|(t, p)| (t - p) as f64).sum::<f64>() / n;
    let aligned = RasterGrid::new(
        stitched.width(),
        stitched.height(),
        stitched.data().iter().map(|&p| p + offset as f32).collect(),
    )
    .unwrap();
    let m = evaluate(&aligned, &tile.dsm, DEFAULT_EPSILON).unwrap();
    println!("{} patches stitched; offset {offset:.2} m, aligned rmse {:.3} m", pred.patches.len(), m.rmse);
}
