//! Seamless merging of per-patch relative height predictions.
//!
//! Every patch prediction is relative to its own (unknown) minimum. The top-left
//! patch is the anchor and keeps its values. Patches in the first row are
//! shifted left to right so that the mean over each shared overlap matches the
//! already-placed neighbour; every other patch is then shifted from the patch
//! directly above it, top to bottom. Pixels covered by several patches receive
//! the mean of their shifted values.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterGrid;

/// One patch rectangle in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub row: usize,
    pub col: usize,
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl PatchRect {
    fn x1(&self) -> usize {
        self.x0 + self.size
    }

    fn y1(&self) -> usize {
        self.y0 + self.size
    }
}

/// Row-major grid of square patches covering an image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLayout {
    width: usize,
    height: usize,
    rows: usize,
    cols: usize,
    overlap: usize,
    rects: Vec<PatchRect>,
}

impl PatchLayout {
    pub fn new(
        width: usize,
        height: usize,
        rows: usize,
        cols: usize,
        overlap: usize,
        rects: Vec<PatchRect>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || rects.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "layout {rows}x{cols} has {} rects",
                rects.len()
            )));
        }
        for (i, r) in rects.iter().enumerate() {
            if r.row != i / cols || r.col != i % cols {
                return Err(Error::InvalidArgument(format!(
                    "rect {i} labelled ({}, {}) out of row-major order",
                    r.row, r.col
                )));
            }
            if r.size == 0 || r.x1() > width || r.y1() > height {
                return Err(Error::OutOfBounds(format!(
                    "rect ({}, {}) at ({}, {}) size {} exceeds {width}x{height}",
                    r.row, r.col, r.x0, r.y0, r.size
                )));
            }
        }
        if rects[0].x0 != 0 || rects[0].y0 != 0 {
            return Err(Error::InvalidArgument("anchor rect must sit at (0, 0)".into()));
        }
        let min_shared = overlap.max(1);
        let layout = Self {
            width,
            height,
            rows,
            cols,
            overlap,
            rects,
        };
        for r in 0..rows {
            for c in 0..cols {
                let here = layout.rect(r, c);
                if c + 1 < cols {
                    let right = layout.rect(r, c + 1);
                    let shared = here.x1().saturating_sub(right.x0);
                    if right.x0 <= here.x0 || shared < min_shared {
                        return Err(Error::InvalidArgument(format!(
                            "patches ({r},{c}) and ({r},{}) share {shared} columns, need {min_shared}",
                            c + 1
                        )));
                    }
                }
                if r + 1 < rows {
                    let below = layout.rect(r + 1, c);
                    let shared = here.y1().saturating_sub(below.y0);
                    if below.y0 <= here.y0 || shared < min_shared {
                        return Err(Error::InvalidArgument(format!(
                            "patches ({r},{c}) and ({},{c}) share {shared} rows, need {min_shared}",
                            r + 1
                        )));
                    }
                }
            }
        }
        Ok(layout)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    pub fn rects(&self) -> &[PatchRect] {
        &self.rects
    }

    pub fn rect(&self, row: usize, col: usize) -> &PatchRect {
        &self.rects[row * self.cols + col]
    }

    /// Writes `row,col,x0,y0,size` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rects {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a layout written by [`PatchLayout::write_csv`]. Image extent is
    /// the union of the rects; the overlap is the smallest shared band.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(reader);
        let mut rects: Vec<PatchRect> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
        if rects.is_empty() {
            return Err(Error::Format("layout CSV has no rows".into()));
        }
        rects.sort_by_key(|r| (r.row, r.col));
        let rows = rects.iter().map(|r| r.row).max().unwrap() + 1;
        let cols = rects.iter().map(|r| r.col).max().unwrap() + 1;
        let width = rects.iter().map(|r| r.x1()).max().unwrap();
        let height = rects.iter().map(|r| r.y1()).max().unwrap();
        if rects.len() != rows * cols {
            return Err(Error::Format(format!(
                "layout CSV has {} rows for a {rows}x{cols} grid",
                rects.len()
            )));
        }
        let mut overlap = usize::MAX;
        for r in &rects {
            if r.col + 1 < cols {
                let right = &rects[r.row * cols + r.col + 1];
                overlap = overlap.min(r.x1().saturating_sub(right.x0));
            }
            if r.row + 1 < rows {
                let below = &rects[(r.row + 1) * cols + r.col];
                overlap = overlap.min(r.y1().saturating_sub(below.y0));
            }
        }
        if overlap == usize::MAX {
            overlap = 0;
        }
        Self::new(width, height, rows, cols, overlap, rects)
    }
}

fn region_mean(grid: &RasterGrid, rect: &PatchRect, x0: usize, x1: usize, y0: usize, y1: usize) -> f64 {
    let mut sum = 0.0f64;
    for y in y0..y1 {
        for x in x0..x1 {
            sum += grid.get(x - rect.x0, y - rect.y0) as f64;
        }
    }
    sum / ((x1 - x0) * (y1 - y0)) as f64
}

/// Offset that, added to `next`, equalizes both patches' means over their
/// shared region: `mean(prev) - mean(next)`.
pub fn estimate_shift(
    prev: &RasterGrid,
    prev_rect: &PatchRect,
    next: &RasterGrid,
    next_rect: &PatchRect,
) -> Result<f64> {
    for (g, r) in [(prev, prev_rect), (next, next_rect)] {
        if g.width() != r.size || g.height() != r.size {
            return Err(Error::Shape(format!(
                "patch {}x{} does not match rect size {}",
                g.width(),
                g.height(),
                r.size
            )));
        }
    }
    let x0 = prev_rect.x0.max(next_rect.x0);
    let x1 = prev_rect.x1().min(next_rect.x1());
    let y0 = prev_rect.y0.max(next_rect.y0);
    let y1 = prev_rect.y1().min(next_rect.y1());
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::InvalidArgument("patches do not overlap".into()));
    }
    Ok(region_mean(prev, prev_rect, x0, x1, y0, y1) - region_mean(next, next_rect, x0, x1, y0, y1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StitchResult {
    /// Merged raster, expressed in the anchor patch's height frame.
    pub raster: RasterGrid,
    /// Shift applied to each patch, row-major. The anchor's is always 0.
    pub shifts: Vec<f64>,
}

impl StitchResult {
    /// Writes `row,col,shift` CSV for diagnosing drift along rows/columns.
    pub fn write_shift_report<W: Write>(&self, layout: &PatchLayout, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["row", "col", "shift"])?;
        for (r, s) in layout.rects().iter().zip(&self.shifts) {
            w.write_record([r.row.to_string(), r.col.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Merges one prediction per layout rect (row-major) into a seamless raster.
pub fn stitch(patches: &[RasterGrid], layout: &PatchLayout) -> Result<StitchResult> {
    if patches.len() != layout.rects().len() {
        return Err(Error::InvalidArgument(format!(
            "layout has {} rects but {} patches were given",
            layout.rects().len(),
            patches.len()
        )));
    }
    for (p, r) in patches.iter().zip(layout.rects()) {
        if p.width() != r.size || p.height() != r.size {
            return Err(Error::Shape(format!(
                "patch ({}, {}) is {}x{}, rect size is {}",
                r.row,
                r.col,
                p.width(),
                p.height(),
                r.size
            )));
        }
        if p.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("patch ({}, {}) has non-finite values", r.row, r.col)));
        }
    }

    let cols = layout.cols();
    let idx = |r: usize, c: usize| r * cols + c;
    let mut shifts = vec![0.0f64; patches.len()];
    for c in 1..cols {
        let (a, b) = (idx(0, c - 1), idx(0, c));
        shifts[b] = shifts[a]
            + estimate_shift(&patches[a], &layout.rects()[a], &patches[b], &layout.rects()[b])?;
    }
    for c in 0..cols {
        for r in 1..layout.rows() {
            let (a, b) = (idx(r - 1, c), idx(r, c));
            shifts[b] = shifts[a]
                + estimate_shift(&patches[a], &layout.rects()[a], &patches[b], &layout.rects()[b])?;
        }
    }

    let (w, h) = (layout.width(), layout.height());
    let mut sum = vec![0.0f64; w * h];
    let mut count = vec![0u32; w * h];
    for ((p, rect), shift) in patches.iter().zip(layout.rects()).zip(&shifts) {
        for y in 0..rect.size {
            let row = (rect.y0 + y) * w + rect.x0;
            for x in 0..rect.size {
                sum[row + x] += p.get(x, y) as f64 + shift;
                count[row + x] += 1;
            }
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "layout leaves pixel ({}, {}) uncovered",
            i % w,
            i / w
        )));
    }
    let data = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| (s / c as f64) as f32)
        .collect();
    Ok(StitchResult {
        raster: RasterGrid::new(w, h, data)?,
        shifts,
    })
}
