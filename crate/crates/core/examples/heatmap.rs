//! Renders a synthetic surface and a signed error map as PPM images.
//!
//! cargo run --example heatmap -- [out_dir]

use std::path::PathBuf;

use ordsurf::heatmap::{diff_heatmap, heatmap};
use ordsurf::raster::save_image;
use ordsurf::synth::{generate_tile, SceneConfig};
use ordsurf::RasterGrid;

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "heatmap_out".into()));
    std::fs::create_dir_all(&out).unwrap();
    let (image, dsm) = generate_tile(&SceneConfig::default(), 2).unwrap();
    let tilted = RasterGrid::from_fn(dsm.width(), dsm.height(), |x, y| {
        dsm.get(x, y) + (x as f32 - y as f32) * 0.01
    })
    .unwrap();

    save_image(&image, out.join("image.ppm")).unwrap();
    save_image(&heatmap(&dsm, None, None).unwrap(), out.join("dsm.ppm")).unwrap();
    save_image(&diff_heatmap(&tilted, &dsm, Some(3.0)).unwrap(), out.join("diff.ppm")).unwrap();
    println!("wrote image.ppm, dsm.ppm and diff.ppm to {}", out.display());
}
