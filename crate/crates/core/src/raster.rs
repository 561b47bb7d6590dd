//! Raster and image containers, file formats, and patch extraction.
//!
//! HMAP layout (all integers little-endian):
//!
//! ```text
//! offset 0   "HMAP"                    4 ASCII bytes
//! offset 4   width                     u32
//! offset 8   height                    u32
//! offset 12  width*height samples      f32, row-major, top row first
//! ```
//!
//! Images are binary PPM (`P6`, maxval 255). A byte `v` becomes `v / 255`;
//! a float `x` is written as `floor(x * 255 + 0.5)` clamped to `[0, 255]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::stitch::{PatchLayout, PatchRect};

pub const HMAP_MAGIC: &[u8; 4] = b"HMAP";
const HMAP_HEADER_LEN: usize = 12;
const MAX_CROP_ATTEMPTS: usize = 10_000;

/// Dense single-channel height raster in meters.
///
/// Equality is bitwise, so two rasters with NaN nodata compare equal when
/// their bits match.
#[derive(Debug, Clone)]
pub struct RasterGrid {
    width: usize,
    height: usize,
    data: Vec<f32>,
    nodata: f32,
}

impl PartialEq for RasterGrid {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.nodata.to_bits() == other.nodata.to_bits()
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl RasterGrid {
    /// Builds a grid whose nodata sentinel is NaN.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        Self::with_nodata(width, height, data, f32::NAN)
    }

    pub fn with_nodata(width: usize, height: usize, data: Vec<f32>, nodata: f32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "raster dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width
            .checked_mul(height)
            .ok_or_else(|| Error::InvalidArgument("raster dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "raster {width}x{height} needs {expected} samples, got {}",
                data.len()
            )));
        }
        let grid = Self {
            width,
            height,
            data,
            nodata,
        };
        if let Some(i) = grid
            .data
            .iter()
            .position(|&v| !grid.is_nodata(v) && !v.is_finite())
        {
            return Err(Error::NonFinite(format!("raster sample {i} is {}", grid.data[i])));
        }
        Ok(grid)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn nodata(&self) -> f32 {
        self.nodata
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        if self.nodata.is_nan() {
            v.is_nan()
        } else {
            v == self.nodata
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> Option<(f32, f32)> {
        self.data
            .iter()
            .copied()
            .filter(|&v| !self.is_nodata(v))
            .fold(None, |acc, v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    /// Copies the `w`x`h` window at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<RasterGrid> {
        check_window(self.width, self.height, x0, y0, w, h)?;
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
        }
        Ok(RasterGrid {
            width: w,
            height: h,
            data,
            nodata: self.nodata,
        })
    }

    pub fn to_hmap_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HMAP_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(HMAP_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_hmap_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HMAP_HEADER_LEN {
            return Err(Error::Format("HMAP header truncated".into()));
        }
        if &bytes[0..4] != HMAP_MAGIC {
            return Err(Error::Format(format!(
                "bad HMAP magic {:?}",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("HMAP dimensions {width}x{height} overflow")))?;
        let body = &bytes[HMAP_HEADER_LEN..];
        if body.len() < payload {
            return Err(Error::Format(format!(
                "HMAP payload truncated: expected {payload} bytes, found {}",
                body.len()
            )));
        }
        if body.len() > payload {
            return Err(Error::Format(format!(
                "HMAP has {} trailing bytes",
                body.len() - payload
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(width, height, data).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Dense interleaved RGB image with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageTile {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width * height * Self::CHANNELS;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "image {width}x{height}x3 needs {expected} samples, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "image sample {i} = {} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        Self::CHANNELS
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageTile> {
        check_window(self.width, self.height, x0, y0, w, h)?;
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Ok(ImageTile {
            width: w,
            height: h,
            data,
        })
    }

    /// Planar (channel-major) copy, the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            out[p] = px[0];
            out[plane + p] = px[1];
            out[2 * plane + p] = px[2];
        }
        out
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = PpmCursor { bytes, pos: 0 };
        if cursor.token()? != "P6" {
            return Err(Error::Format("not a binary PPM (expected P6)".into()));
        }
        let width = cursor.number()?;
        let height = cursor.number()?;
        let maxval = cursor.number()?;
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        cursor.pos += 1;
        let n = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Error::Format("PPM dimensions overflow".into()))?;
        let body = bytes.get(cursor.pos..).unwrap_or(&[]);
        if body.len() < n {
            return Err(Error::Format(format!(
                "PPM raster truncated: expected {n} bytes, found {}",
                body.len()
            )));
        }
        let data = body[..n].iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(width, height, data).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Float sample to byte, round-half-up.
pub fn quantize(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

struct PpmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PpmCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("PPM header truncated".into()));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::Format(format!("bad PPM header field {tok:?}")))
    }
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<RasterGrid> {
    RasterGrid::from_hmap_bytes(&fs::read(path)?)
}

pub fn save_raster(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&grid.to_hmap_bytes())?;
    Ok(())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTile> {
    ImageTile::from_ppm_bytes(&fs::read(path)?)
}

pub fn save_image(image: &ImageTile, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&image.to_ppm_bytes())?;
    Ok(())
}

fn check_window(width: usize, height: usize, x0: usize, y0: usize, w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 || x0 + w > width || y0 + h > height {
        return Err(Error::OutOfBounds(format!(
            "window {w}x{h} at ({x0},{y0}) does not fit in {width}x{height}"
        )));
    }
    Ok(())
}

/// Where a patch came from and the height that was subtracted from it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub local_min: f32,
}

/// Subtracts a grid's own minimum so its smallest sample is exactly zero.
pub fn localize(grid: &RasterGrid) -> Result<(RasterGrid, f32)> {
    if grid.data.iter().any(|&v| grid.is_nodata(v)) {
        let all = grid.data.iter().all(|&v| grid.is_nodata(v));
        return Err(Error::NoData(if all {
            "crop is entirely nodata".into()
        } else {
            "crop contains nodata pixels".into()
        }));
    }
    let min = grid.data.iter().copied().fold(f32::INFINITY, f32::min);
    let data = grid.data.iter().map(|&v| v - min).collect();
    Ok((
        RasterGrid {
            width: grid.width,
            height: grid.height,
            data,
            nodata: grid.nodata,
        },
        min,
    ))
}

/// Crops a square window and expresses it relative to its own minimum.
pub fn localize_patch(
    grid: &RasterGrid,
    x0: usize,
    y0: usize,
    size: usize,
) -> Result<(RasterGrid, PatchSpec)> {
    let crop = grid.crop(x0, y0, size, size)?;
    let (local, local_min) = localize(&crop)?;
    Ok((
        local,
        PatchSpec {
            x0,
            y0,
            size,
            local_min,
        },
    ))
}

/// Draws a co-located image/height crop uniformly over valid positions.
///
/// Positions whose height crop contains nodata are rejected and redrawn.
pub fn random_crop_pair(
    image: &ImageTile,
    dsm: &RasterGrid,
    size: usize,
    rng: &mut SplitMix64,
) -> Result<(ImageTile, RasterGrid, PatchSpec)> {
    if image.width != dsm.width || image.height != dsm.height {
        return Err(Error::Shape(format!(
            "image {}x{} and dsm {}x{} differ",
            image.width, image.height, dsm.width, dsm.height
        )));
    }
    if size == 0 || size > dsm.width || size > dsm.height {
        return Err(Error::InvalidArgument(format!(
            "crop size {size} exceeds source {}x{}",
            dsm.width, dsm.height
        )));
    }
    let nx = (dsm.width - size + 1) as u64;
    let ny = (dsm.height - size + 1) as u64;
    for _ in 0..MAX_CROP_ATTEMPTS {
        let x0 = rng.below(nx) as usize;
        let y0 = rng.below(ny) as usize;
        match localize_patch(dsm, x0, y0, size) {
            Ok((heights, spec)) => {
                let img = image.crop(x0, y0, size, size)?;
                return Ok((img, heights, spec));
            }
            Err(Error::NoData(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::NoData(format!(
        "no nodata-free {size}x{size} crop found after {MAX_CROP_ATTEMPTS} draws"
    )))
}

/// Offsets along one axis: stride `patch - overlap`, last one clamped to the edge.
fn axis_offsets(len: usize, patch: usize, overlap: usize) -> Vec<usize> {
    let stride = patch - overlap;
    let mut out = vec![0];
    let mut v = 0;
    while v + patch < len {
        v += stride;
        if v + patch > len {
            v = len - patch;
        }
        out.push(v);
    }
    out
}

/// Gridded test-time tiling with at least `overlap` shared pixels between neighbours.
pub fn plan_grid(width: usize, height: usize, patch_size: usize, overlap: usize) -> Result<PatchLayout> {
    if patch_size == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    if overlap >= patch_size {
        return Err(Error::InvalidArgument(format!(
            "overlap {overlap} must be smaller than patch size {patch_size}"
        )));
    }
    if width < patch_size || height < patch_size {
        return Err(Error::InvalidArgument(format!(
            "image {width}x{height} smaller than patch size {patch_size}"
        )));
    }
    let xs = axis_offsets(width, patch_size, overlap);
    let ys = axis_offsets(height, patch_size, overlap);
    let mut rects = Vec::with_capacity(xs.len() * ys.len());
    for (row, &y0) in ys.iter().enumerate() {
        for (col, &x0) in xs.iter().enumerate() {
            rects.push(PatchRect {
                row,
                col,
                x0,
                y0,
                size: patch_size,
            });
        }
    }
    PatchLayout::new(width, height, ys.len(), xs.len(), overlap, rects)
}

/// A co-registered image and height raster.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePair {
    pub image: ImageTile,
    pub dsm: RasterGrid,
}

impl TilePair {
    pub fn new(image: ImageTile, dsm: RasterGrid) -> Result<Self> {
        if (image.width, image.height) != (dsm.width, dsm.height) {
            return Err(Error::Shape(format!(
                "image {}x{} and dsm {}x{} differ",
                image.width, image.height, dsm.width, dsm.height
            )));
        }
        Ok(Self { image, dsm })
    }
}
