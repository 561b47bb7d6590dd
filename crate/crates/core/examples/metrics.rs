//! Scores a perturbed surface against its truth and prints the metric table.

use ordsurf::metrics::{evaluate, format_table, DEFAULT_EPSILON};
use ordsurf::synth::{generate_tile, SceneConfig};
use ordsurf::{RasterGrid, SplitMix64};

fn main() {
    let (_, truth) = generate_tile(&SceneConfig::default(), 0).unwrap();
    let mut rng = SplitMix64::new(5);
    let noisy = RasterGrid::new(
        truth.width(),
        truth.height(),
        truth.data().iter().map(|&h| (h as f64 + rng.uniform(-0.5, 0.5)).max(0.0) as f32).collect(),
    )
    .unwrap();
    let scaled = RasterGrid::new(truth.width(), truth.height(), truth.data().iter().map(|h| h * 1.2).collect()).unwrap();

    let rows = [
        ("+-0.5 m noise", evaluate(&noisy, &truth, DEFAULT_EPSILON).unwrap()),
        ("x1.2 scale", evaluate(&scaled, &truth, DEFAULT_EPSILON).unwrap()),
    ];
    print!("{}", format_table(&rows));
    println!("{} pixels masked below {DEFAULT_EPSILON} m", rows[0].1.n_masked);
}
