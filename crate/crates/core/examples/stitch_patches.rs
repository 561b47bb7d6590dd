//! Splits a synthetic surface into overlapping patches, throws away each
//! patch's absolute level, and stitches the relative heights back together.

use ordsurf::raster::{localize_patch, plan_grid};
use ordsurf::stitch::stitch;
use ordsurf::synth::{generate_tile, SceneConfig};

fn main() {
    let cfg = SceneConfig { tile_size: 200, seed: 9, ..SceneConfig::default() };
    let (_, truth) = generate_tile(&cfg, 0).unwrap();
    let layout = plan_grid(truth.width(), truth.height(), 64, 4).unwrap();
    println!("{}x{} grid of 64 px patches", layout.rows(), layout.cols());

    let patches: Vec<_> = layout
        .rects()
        .iter()
        .map(|r| localize_patch(&truth, r.x0, r.y0, r.size).unwrap().0)
        .collect();
    let result = stitch(&patches, &layout).unwrap();

    for (r, s) in layout.rects().iter().zip(&result.shifts).take(4) {
        println!("patch ({}, {}) shifted by {s:+.3} m", r.row, r.col);
    }
    let offset = result.raster.get(0, 0) - truth.get(0, 0);
    let worst = result
        .raster
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b - offset).abs())
        .fold(0.0f32, f32::max);
    println!("stitched surface matches truth up to {offset:+.3} m, max residual {worst:.2e} m");
}
