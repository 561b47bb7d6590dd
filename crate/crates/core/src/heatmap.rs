//! False-color rendering of height rasters.
//!
//! The sequential ramp has 256 entries linearly interpolated between five
//! anchors placed at equal spacing (entry `i` sits at `4 i / 255` along the
//! anchor list):
//!
//! | position | RGB           |
//! |----------|---------------|
//! | 0.00     | 68, 1, 84     |
//! | 0.25     | 59, 82, 139   |
//! | 0.50     | 33, 145, 140  |
//! | 0.75     | 94, 201, 98   |
//! | 1.00     | 253, 231, 37  |
//!
//! The signed ramp used for differences runs blue (49, 54, 149) through
//! white at zero to red (165, 0, 38). Channels are rounded half up.
//! Values map to index `floor((v - lo) / (hi - lo) * 255 + 0.5)`, clamped;
//! a constant raster maps entirely to index 0 (or 128 in signed mode) and
//! nodata pixels are black.

use crate::error::{Error, Result};
use crate::raster::{ImageTile, RasterGrid};

const ANCHORS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];
const NEG: [f64; 3] = [49.0, 54.0, 149.0];
const MID: [f64; 3] = [255.0, 255.0, 255.0];
const POS: [f64; 3] = [165.0, 0.0, 38.0];

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [u8; 3] {
    [0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * t + 0.5).floor() as u8)
}

pub fn ramp() -> [[u8; 3]; 256] {
    let mut out = [[0u8; 3]; 256];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = i as f64 * 4.0 / 255.0;
        let seg = (pos.floor() as usize).min(3);
        *o = lerp(ANCHORS[seg], ANCHORS[seg + 1], pos - seg as f64);
    }
    out
}

pub fn signed_ramp() -> [[u8; 3]; 256] {
    let mut out = [[0u8; 3]; 256];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / 255.0;
        *o = if t <= 0.5 {
            lerp(NEG, MID, t * 2.0)
        } else {
            lerp(MID, POS, t * 2.0 - 1.0)
        };
    }
    out
}

/// Ramp index of `v` for the range `[lo, hi]`.
pub fn ramp_index(v: f64, lo: f64, hi: f64) -> usize {
    if hi <= lo {
        return 0;
    }
    ((v - lo) / (hi - lo) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as usize
}

fn render(grid: &RasterGrid, table: &[[u8; 3]; 256], index: impl Fn(f64) -> usize) -> Result<ImageTile> {
    let mut data = Vec::with_capacity(grid.data().len() * 3);
    for &v in grid.data() {
        let rgb = if grid.is_nodata(v) { [0, 0, 0] } else { table[index(v as f64)] };
        data.extend(rgb.iter().map(|&c| c as f32 / 255.0));
    }
    ImageTile::new(grid.width(), grid.height(), data)
}

/// Sequential heatmap; `min`/`max` default to the raster's own range.
pub fn heatmap(grid: &RasterGrid, min: Option<f64>, max: Option<f64>) -> Result<ImageTile> {
    let (lo, hi) = match grid.min_max() {
        Some((a, b)) => (min.unwrap_or(a as f64), max.unwrap_or(b as f64)),
        None => (min.unwrap_or(0.0), max.unwrap_or(0.0)),
    };
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::InvalidArgument(format!("invalid heatmap range [{lo}, {hi}]")));
    }
    render(grid, &ramp(), |v| ramp_index(v, lo, hi))
}

/// Signed heatmap of `pred - truth`, symmetric around zero. `limit`
/// defaults to the largest absolute difference.
pub fn diff_heatmap(pred: &RasterGrid, truth: &RasterGrid, limit: Option<f64>) -> Result<ImageTile> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(Error::Shape("prediction and truth sizes differ".into()));
    }
    let diff: Vec<f32> = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| {
            if pred.is_nodata(p) || truth.is_nodata(t) {
                f32::NAN
            } else {
                p - t
            }
        })
        .collect();
    let grid = RasterGrid::new(pred.width(), pred.height(), diff)?;
    let lim = limit.unwrap_or_else(|| grid.min_max().map_or(0.0, |(a, b)| a.abs().max(b.abs()) as f64));
    if !(lim.is_finite() && lim >= 0.0) {
        return Err(Error::InvalidArgument(format!("invalid difference limit {lim}")));
    }
    render(&grid, &signed_ramp(), |v| {
        if lim == 0.0 {
            128
        } else {
            ramp_index(v, -lim, lim)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_are_anchors() {
        let r = ramp();
        assert_eq!(r[0], [68, 1, 84]);
        assert_eq!(r[255], [253, 231, 37]);
        let s = signed_ramp();
        assert_eq!(s[0], [49, 54, 149]);
        assert_eq!(s[255], [165, 0, 38]);
    }

    #[test]
    fn ramp_entries_are_distinct_neighbours() {
        let mut uniq = ramp().to_vec();
        uniq.dedup();
        assert!(uniq.len() > 200);
    }

    #[test]
    fn index_is_monotone_over_all_levels() {
        let mut prev = 0;
        for i in 0..=100_000 {
            let v = i as f64 / 100_000.0 * 37.5 - 2.0;
            let idx = ramp_index(v, -2.0, 35.5);
            assert!(idx >= prev);
            prev = idx;
        }
        assert_eq!(prev, 255);
        for level in 0..256 {
            assert_eq!(ramp_index(level as f64, 0.0, 255.0), level);
        }
    }

    #[test]
    fn constant_raster_is_one_color() {
        let g = RasterGrid::filled(5, 4, 3.25).unwrap();
        let img = heatmap(&g, None, None).unwrap();
        assert!(img.data().chunks(3).all(|p| p == &img.data()[..3]));
    }

    #[test]
    fn extremes_hit_endpoints() {
        let g = RasterGrid::new(3, 1, vec![1.0, 5.0, 9.0]).unwrap();
        let img = heatmap(&g, None, None).unwrap();
        let px = |x| img.pixel(x, 0).map(crate::raster::quantize);
        assert_eq!(px(0), [68, 1, 84]);
        assert_eq!(px(2), [253, 231, 37]);
        assert!(heatmap(&g, Some(5.0), Some(1.0)).is_err());
    }

    #[test]
    fn diff_uses_signed_ramp() {
        let p = RasterGrid::new(3, 1, vec![0.0, 2.0, 4.0]).unwrap();
        let t = RasterGrid::new(3, 1, vec![2.0, 2.0, 2.0]).unwrap();
        let img = diff_heatmap(&p, &t, None).unwrap();
        let px = |x| img.pixel(x, 0).map(crate::raster::quantize);
        assert_eq!(px(0), [49, 54, 149]);
        assert_eq!(px(2), [165, 0, 38]);
        assert_eq!(px(1), signed_ramp()[128]);
    }

    #[test]
    fn nodata_is_black() {
        let g = RasterGrid::new(2, 1, vec![f32::NAN, 1.0]).unwrap();
        let img = heatmap(&g, None, None).unwrap();
        assert_eq!(img.pixel(0, 0), [0.0, 0.0, 0.0]);
    }
}
