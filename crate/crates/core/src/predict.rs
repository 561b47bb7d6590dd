//! Patch-wise inference and stitching of whole images.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::discretize::{DiscretizationScheme, Midpoint};
use crate::error::{Error, Result};
use crate::net::{OrdinalNet, Tensor};
use crate::ordinal::head_to_heights;
use crate::raster::{plan_grid, save_raster, ImageTile, RasterGrid};
use crate::stitch::{stitch, PatchLayout, StitchResult};

/// `(1, 3, H, W)` network input from an interleaved RGB tile.
pub fn image_tensor(image: &ImageTile) -> Result<Tensor<f32>> {
    Tensor::from_vec(&[1, 3, image.height(), image.width()], image.to_planar())
}

/// Localized heights for one image patch.
pub fn predict_patch(
    net: &OrdinalNet<f32>,
    scheme: &DiscretizationScheme,
    image: &ImageTile,
    midpoint: Midpoint,
) -> Result<RasterGrid> {
    let pass = net.forward(image_tensor(image)?)?;
    head_to_heights(
        net.config().head,
        pass.output().data(),
        image.width(),
        image.height(),
        scheme,
        midpoint,
    )
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub layout: PatchLayout,
    pub patches: Vec<RasterGrid>,
    pub stitched: StitchResult,
}

/// Tiles `image` into overlapping patches, predicts each, and stitches.
pub fn predict_image(
    net: &OrdinalNet<f32>,
    scheme: &DiscretizationScheme,
    image: &ImageTile,
    patch: usize,
    overlap: usize,
    midpoint: Midpoint,
) -> Result<Prediction> {
    if scheme.k() != net.config().k {
        return Err(Error::Config(format!(
            "scheme has K={} but the network was built for K={}",
            scheme.k(),
            net.config().k
        )));
    }
    let layout = plan_grid(image.width(), image.height(), patch, overlap)?;
    let patches = layout
        .rects()
        .par_iter()
        .map(|r| predict_patch(net, scheme, &image.crop(r.x0, r.y0, r.size, r.size)?, midpoint))
        .collect::<Result<Vec<_>>>()?;
    let stitched = stitch(&patches, &layout)?;
    Ok(Prediction {
        layout,
        patches,
        stitched,
    })
}

/// Writes `patch_r<row>_c<col>.hmap`, `stitched.hmap`, `shifts.csv` and `layout.csv`.
pub fn write_prediction(pred: &Prediction, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    for (r, p) in pred.layout.rects().iter().zip(&pred.patches) {
        save_raster(p, dir.join(format!("patch_r{:03}_c{:03}.hmap", r.row, r.col)))?;
    }
    save_raster(&pred.stitched.raster, dir.join("stitched.hmap"))?;
    pred.stitched
        .write_shift_report(&pred.layout, fs::File::create(dir.join("shifts.csv"))?)?;
    pred.layout.write_csv(fs::File::create(dir.join("layout.csv"))?)?;
    Ok(())
}
