//! Writes a small synthetic dataset and prints what one scene contains.
//!
//! cargo run --example synth_dataset -- [out_dir] [n_tiles]

use ordsurf::synth::{generate_dataset, generate_scene, SceneConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "synth_out".into());
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let cfg = SceneConfig::default();

    let scene = generate_scene(&cfg, 0).unwrap();
    let shadowed = scene.shadow.iter().filter(|&&s| s).count();
    println!("tile 0: {} buildings, {shadowed} shadowed pixels", scene.buildings.len());
    for b in &scene.buildings {
        println!("  {}x{} px footprint, {:.1} m tall", b.w, b.h, b.height);
    }
    let (lo, hi) = scene.dsm.min_max().unwrap();
    println!("  surface spans {lo:.2} .. {hi:.2} m");

    let entries = generate_dataset(&cfg, n, &out).unwrap();
    println!("wrote {} tiles and manifest.csv to {out}", entries.len());
}
