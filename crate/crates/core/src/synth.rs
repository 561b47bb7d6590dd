//! Procedural aerial tiles with matching height rasters.
//!
//! A scene is gently undulating ground plus non-overlapping box buildings
//! with log-normally distributed heights. The image shows textured ground,
//! roofs whose brightness grows with height, and hard shadows whose length
//! is proportional to height. Tile `i` of a dataset is drawn from the
//! random stream `(seed, i)`, so tiles can be generated in any order.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{load_image, load_raster, save_image, save_raster, ImageTile, RasterGrid, TilePair};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub tile_size: usize,
    /// Inclusive range of building counts per tile.
    pub n_buildings: (usize, usize),
    /// Inclusive range of footprint side lengths in pixels.
    pub footprint_px: (usize, usize),
    /// Log-normal height parameters (of the natural log, meters).
    pub height_mu: f64,
    pub height_sigma: f64,
    pub max_height: f64,
    pub ground_texture_amp: f64,
    /// Compass direction shadows are cast toward: 0 is up, 90 is right.
    pub sun_azimuth: f64,
    pub shadow_px_per_meter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            tile_size: 320,
            n_buildings: (5, 12),
            footprint_px: (12, 48),
            height_mu: 6f64.ln(),
            height_sigma: 0.6,
            max_height: 40.0,
            ground_texture_amp: 0.5,
            sun_azimuth: 135.0,
            shadow_px_per_meter: 0.5,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.n_buildings;
        let (flo, fhi) = self.footprint_px;
        if self.tile_size == 0 {
            return Err(Error::Config("tile size must be positive".into()));
        }
        if lo > hi || flo == 0 || flo > fhi || fhi > self.tile_size {
            return Err(Error::Config("invalid building count or footprint range".into()));
        }
        if !(self.height_sigma >= 0.0 && self.max_height > 0.0 && self.ground_texture_amp >= 0.0) {
            return Err(Error::Config("invalid height parameters".into()));
        }
        if !(self.shadow_px_per_meter >= 0.0 && self.sun_azimuth.is_finite() && self.height_mu.is_finite()) {
            return Err(Error::Config("invalid shadow parameters".into()));
        }
        Ok(())
    }
}

/// Axis-aligned building footprint `[x0, x0 + w) x [y0, y0 + h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Building {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub height: f64,
}

impl Building {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    fn overlaps(&self, o: &Building) -> bool {
        self.x0 < o.x0 + o.w && o.x0 < self.x0 + self.w && self.y0 < o.y0 + o.h && o.y0 < self.y0 + self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub buildings: Vec<Building>,
    /// Row-major flags for ground pixels covered by a cast shadow.
    pub shadow: Vec<bool>,
    pub image: ImageTile,
    pub dsm: RasterGrid,
}

const PLACEMENT_ATTEMPTS: usize = 200;
const GROUND_RGB: [f64; 3] = [0.42, 0.47, 0.34];
const SHADOW_FACTOR: f64 = 0.45;

/// Roof gray level: rises with `ln(1 + height)` from 0.25 to 0.95.
pub fn roof_brightness(height: f64, max_height: f64) -> f64 {
    0.25 + 0.7 * (height.max(0.0).ln_1p() / max_height.ln_1p()).min(1.0)
}

/// Draws one building height.
pub fn sample_height(cfg: &SceneConfig, rng: &mut SplitMix64) -> f64 {
    (cfg.height_mu + cfg.height_sigma * rng.normal()).exp().min(cfg.max_height)
}

fn hash_noise(seed: u64, index: u64, x: usize, y: usize) -> f64 {
    let mut r = SplitMix64::new(seed ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ ((y as u64) << 32 | x as u64));
    r.next_f64() - 0.5
}

pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let n = cfg.tile_size;
    let mut rng = SplitMix64::stream(cfg.seed, index);

    // ground: three low-frequency waves, normalised to [0, amp]
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let fx = rng.uniform(0.5, 2.0);
            let fy = rng.uniform(0.5, 2.0);
            (fx, fy, rng.uniform(0.0, 2.0 * PI))
        })
        .collect();
    let ground = |x: usize, y: usize| -> f64 {
        let s: f64 = waves
            .iter()
            .map(|&(fx, fy, ph)| (2.0 * PI * (fx * x as f64 + fy * y as f64) / n as f64 + ph).sin())
            .sum::<f64>()
            / 3.0;
        cfg.ground_texture_amp * 0.5 * (1.0 + s)
    };

    let count = rng.range_inclusive(cfg.n_buildings.0 as u64, cfg.n_buildings.1 as u64) as usize;
    let mut buildings: Vec<Building> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.range_inclusive(cfg.footprint_px.0 as u64, cfg.footprint_px.1 as u64) as usize;
            let h = rng.range_inclusive(cfg.footprint_px.0 as u64, cfg.footprint_px.1 as u64) as usize;
            let x0 = rng.below((n - w + 1) as u64) as usize;
            let y0 = rng.below((n - h + 1) as u64) as usize;
            let cand = Building {
                x0,
                y0,
                w,
                h,
                height: 0.0,
            };
            if buildings.iter().all(|b| !b.overlaps(&cand)) {
                buildings.push(Building {
                    height: sample_height(cfg, &mut rng),
                    ..cand
                });
                break;
            }
        }
    }

    let mut roof_of = vec![usize::MAX; n * n];
    for (i, b) in buildings.iter().enumerate() {
        for y in b.y0..b.y0 + b.h {
            for x in b.x0..b.x0 + b.w {
                roof_of[y * n + x] = i;
            }
        }
    }

    let az = cfg.sun_azimuth.to_radians();
    let (dx, dy) = (az.sin(), -az.cos());
    let mut shadow = vec![false; n * n];
    for b in &buildings {
        let len = (cfg.shadow_px_per_meter * b.height).round() as i64;
        for t in 1..=len {
            let ox = (t as f64 * dx).round() as i64;
            let oy = (t as f64 * dy).round() as i64;
            for y in b.y0 as i64 + oy..(b.y0 + b.h) as i64 + oy {
                for x in b.x0 as i64 + ox..(b.x0 + b.w) as i64 + ox {
                    if x >= 0 && y >= 0 && (x as usize) < n && (y as usize) < n {
                        let i = y as usize * n + x as usize;
                        if roof_of[i] == usize::MAX {
                            shadow[i] = true;
                        }
                    }
                }
            }
        }
    }

    let mut dsm = Vec::with_capacity(n * n);
    let mut rgb = Vec::with_capacity(n * n * 3);
    let amp = cfg.ground_texture_amp.max(1e-9);
    for y in 0..n {
        for x in 0..n {
            let g = ground(x, y);
            let i = y * n + x;
            let (height, color) = if roof_of[i] != usize::MAX {
                let b = &buildings[roof_of[i]];
                let v = roof_brightness(b.height, cfg.max_height);
                (g + b.height, [v, v, v * 0.96])
            } else {
                let tex = 0.06 * (g / amp - 0.5) + 0.04 * hash_noise(cfg.seed, index, x, y);
                let shade = if shadow[i] { SHADOW_FACTOR } else { 1.0 };
                (g, GROUND_RGB.map(|c| (c + tex) * shade))
            };
            dsm.push(height as f32);
            rgb.extend(color.iter().map(|&c| c.clamp(0.0, 1.0) as f32));
        }
    }
    Ok(Scene {
        buildings,
        shadow,
        image: ImageTile::new(n, n, rgb)?,
        dsm: RasterGrid::new(n, n, dsm)?,
    })
}

pub fn generate_tile(cfg: &SceneConfig, index: u64) -> Result<(ImageTile, RasterGrid)> {
    let s = generate_scene(cfg, index)?;
    Ok((s.image, s.dsm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub image: String,
    pub dsm: String,
    pub max_height: f64,
}

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Writes `n_tiles` PPM/HMAP pairs and `manifest.csv` into `out_dir`.
/// Paths in the manifest are relative to `out_dir`.
pub fn generate_dataset(cfg: &SceneConfig, n_tiles: usize, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let entries = (0..n_tiles as u64)
        .into_par_iter()
        .map(|index| {
            let (image, dsm) = generate_tile(cfg, index)?;
            let entry = ManifestEntry {
                index,
                image: format!("tile_{index:05}.ppm"),
                dsm: format!("tile_{index:05}.hmap"),
                max_height: dsm.min_max().map_or(0.0, |(_, hi)| hi as f64),
            };
            save_image(&image, dir.join(&entry.image))?;
            save_raster(&dsm, dir.join(&entry.dsm))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST_NAME))?;
    for e in &entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(entries)
}

/// Accepts either a manifest file or the directory holding `manifest.csv`.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<(PathBuf, Vec<ManifestEntry>)> {
    let path = path.as_ref();
    let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut r = csv::Reader::from_path(&file)?;
    let entries = r.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
    Ok((base, entries))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TilePair>> {
    let (base, entries) = read_manifest(path)?;
    entries
        .iter()
        .map(|e| TilePair::new(load_image(base.join(&e.image))?, load_raster(base.join(&e.dsm))?))
        .collect()
}
