//! Height discretization into ordinal classes.
//!
//! Two threshold families over a height interval `[a, b]` split into `K` bins:
//!
//! - spacing-increasing (SID): uniform in log space after shifting both ends
//!   by one meter, `t_i = ln(a + 1) + ln((b + 1) / (a + 1)) * i / K`;
//! - uniform (UD): `t_i = a + (b - a) * i / K`, in meters.
//!
//! SID bins get wider as heights grow, so low heights are resolved finely.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Sid,
    Ud,
}

impl SchemeKind {
    pub fn to_byte(self) -> u8 {
        match self {
            SchemeKind::Sid => 0,
            SchemeKind::Ud => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(SchemeKind::Sid),
            1 => Ok(SchemeKind::Ud),
            _ => Err(Error::Format(format!("unknown scheme kind byte {b}"))),
        }
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sid" => Ok(SchemeKind::Sid),
            "ud" => Ok(SchemeKind::Ud),
            _ => Err(Error::InvalidArgument(format!("unknown scheme kind {s:?}"))),
        }
    }
}

/// How a class index is turned back into meters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Midpoint {
    /// Average the two thresholds in threshold space (log space for SID).
    #[default]
    Geometric,
    /// Average the two bin edges in meters.
    Linear,
}

impl std::str::FromStr for Midpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "geometric" => Ok(Midpoint::Geometric),
            "linear" => Ok(Midpoint::Linear),
            _ => Err(Error::InvalidArgument(format!("unknown midpoint {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizationScheme {
    kind: SchemeKind,
    a: f64,
    b: f64,
    k: usize,
    thresholds: Vec<f64>,
}

impl DiscretizationScheme {
    pub fn new(kind: SchemeKind, a: f64, b: f64, k: usize) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite bounds a={a}, b={b}")));
        }
        if a < 0.0 || b <= a {
            return Err(Error::InvalidArgument(format!("need b > a >= 0, got a={a}, b={b}")));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if k > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("K={k} exceeds the u16 class range")));
        }
        let (lo, hi) = match kind {
            SchemeKind::Sid => ((a + 1.0).ln(), (b + 1.0).ln()),
            SchemeKind::Ud => (a, b),
        };
        let mut thresholds: Vec<f64> = match kind {
            SchemeKind::Sid => {
                let ratio = ((b + 1.0) / (a + 1.0)).ln();
                (0..=k).map(|i| lo + ratio * i as f64 / k as f64).collect()
            }
            SchemeKind::Ud => (0..=k).map(|i| a + (b - a) * i as f64 / k as f64).collect(),
        };
        thresholds[0] = lo;
        thresholds[k] = hi;
        if thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "interval [{a}, {b}] too narrow for K={k} distinct thresholds"
            )));
        }
        Ok(Self {
            kind,
            a,
            b,
            k,
            thresholds,
        })
    }

    pub fn sid(a: f64, b: f64, k: usize) -> Result<Self> {
        Self::new(SchemeKind::Sid, a, b, k)
    }

    pub fn ud(a: f64, b: f64, k: usize) -> Result<Self> {
        Self::new(SchemeKind::Ud, a, b, k)
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `t_0 ..= t_K`, in log space for SID and meters for UD.
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Maps meters into threshold space.
    pub fn to_threshold_space(&self, height: f64) -> f64 {
        match self.kind {
            SchemeKind::Sid => height.ln_1p(),
            SchemeKind::Ud => height,
        }
    }

    /// Inverse of [`Self::to_threshold_space`].
    pub fn to_meters(&self, t: f64) -> f64 {
        match self.kind {
            SchemeKind::Sid => t.exp_m1(),
            SchemeKind::Ud => t,
        }
    }

    /// Bin `d` in meters, `[lower, upper]`.
    pub fn bin_edges(&self, d: usize) -> (f64, f64) {
        (
            self.to_meters(self.thresholds[d]),
            self.to_meters(self.thresholds[d + 1]),
        )
    }

    /// Class of a height; values outside `[a, b]` clamp to the end classes.
    pub fn encode(&self, height: f64) -> Result<usize> {
        if height.is_nan() {
            return Err(Error::NonFinite("cannot encode NaN height".into()));
        }
        if height <= self.a {
            return Ok(0);
        }
        let t = self.to_threshold_space(height);
        let above = self.thresholds.partition_point(|&th| th <= t);
        Ok(above.saturating_sub(1).min(self.k - 1))
    }

    pub fn encode_map(&self, grid: &RasterGrid) -> Result<ClassMap> {
        let classes = grid
            .data()
            .iter()
            .map(|&v| {
                if grid.is_nodata(v) {
                    Err(Error::NoData("cannot encode nodata pixel".into()))
                } else {
                    self.encode(v as f64).map(|c| c as u16)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        ClassMap::new(grid.width(), grid.height(), self.k, classes)
    }

    /// Height for class `d`, using the geometric (threshold-space) midpoint.
    pub fn decode(&self, d: usize) -> Result<f64> {
        self.decode_with(d, Midpoint::Geometric)
    }

    pub fn decode_with(&self, d: usize, midpoint: Midpoint) -> Result<f64> {
        if d >= self.k {
            return Err(Error::OutOfBounds(format!("class {d} >= K={}", self.k)));
        }
        let (t0, t1) = (self.thresholds[d], self.thresholds[d + 1]);
        Ok(match midpoint {
            Midpoint::Geometric => self.to_meters((t0 + t1) / 2.0),
            Midpoint::Linear => (self.to_meters(t0) + self.to_meters(t1)) / 2.0,
        })
    }

    pub fn decode_map(&self, classes: &ClassMap, midpoint: Midpoint) -> Result<RasterGrid> {
        if classes.k() != self.k {
            return Err(Error::Shape(format!(
                "class map has K={}, scheme has K={}",
                classes.k(),
                self.k
            )));
        }
        let lut = (0..self.k)
            .map(|d| self.decode_with(d, midpoint).map(|h| h as f32))
            .collect::<Result<Vec<_>>>()?;
        let data = classes.classes().iter().map(|&c| lut[c as usize]).collect();
        RasterGrid::new(classes.width(), classes.height(), data)
    }

    /// Checkpoint block: kind byte, f64 a, f64 b, u32 K (little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21);
        out.push(self.kind.to_byte());
        out.extend_from_slice(&self.a.to_le_bytes());
        out.extend_from_slice(&self.b.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out
    }

    pub const ENCODED_LEN: usize = 21;

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < Self::ENCODED_LEN {
            return Err(Error::Format("scheme block truncated".into()));
        }
        let kind = SchemeKind::from_byte(bytes[0])?;
        let a = f64::from_le_bytes(bytes[1..9].try_into().unwrap());
        let b = f64::from_le_bytes(bytes[9..17].try_into().unwrap());
        let k = u32::from_le_bytes(bytes[17..21].try_into().unwrap()) as usize;
        Self::new(kind, a, b, k).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Per-pixel ordinal class indices, each `< K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    width: usize,
    height: usize,
    k: usize,
    classes: Vec<u16>,
}

impl ClassMap {
    pub fn new(width: usize, height: usize, k: usize, classes: Vec<u16>) -> Result<Self> {
        if classes.len() != width * height {
            return Err(Error::Shape(format!(
                "class map {width}x{height} needs {} entries, got {}",
                width * height,
                classes.len()
            )));
        }
        if let Some(c) = classes.iter().find(|&&c| c as usize >= k) {
            return Err(Error::OutOfBounds(format!("class {c} >= K={k}")));
        }
        Ok(Self {
            width,
            height,
            k,
            classes,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn classes(&self) -> &[u16] {
        &self.classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn sid_worked_example() {
        let s = DiscretizationScheme::sid(0.0, 99.0, 2).unwrap();
        let t = s.thresholds();
        assert_eq!(t[0], 0.0);
        assert!((t[1] - std::f64::consts::LN_10).abs() < 1e-12);
        assert!((t[2] - 4.605170185988092).abs() < 1e-12);
    }

    #[test]
    fn ud_thresholds() {
        let s = DiscretizationScheme::ud(0.0, 10.0, 5).unwrap();
        assert_eq!(s.thresholds(), &[0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(DiscretizationScheme::sid(f64::NAN, 1.0, 2).is_err());
        assert!(DiscretizationScheme::sid(5.0, 5.0, 2).is_err());
        assert!(DiscretizationScheme::sid(0.0, 1.0, 0).is_err());
        assert!(DiscretizationScheme::ud(-1.0, 1.0, 2).is_err());
    }

    #[test]
    fn encode_examples() {
        let s = DiscretizationScheme::sid(0.0, 99.0, 2).unwrap();
        assert_eq!(s.encode(0.0).unwrap(), 0);
        assert_eq!(s.encode(5.0).unwrap(), 0);
        assert_eq!(s.encode(50.0).unwrap(), 1);
        assert_eq!(s.encode(500.0).unwrap(), 1);
        assert!(s.encode(f64::NAN).is_err());
        let u = DiscretizationScheme::ud(2.0, 10.0, 4).unwrap();
        assert_eq!(u.encode(0.5).unwrap(), 0);
        assert_eq!(u.encode(4.0).unwrap(), 1);
    }

    #[test]
    fn decode_examples() {
        let s = DiscretizationScheme::sid(0.0, 99.0, 2).unwrap();
        assert!((s.decode(0).unwrap() - 2.1622776601683795).abs() < 1e-12);
        assert!(s.decode(2).is_err());
        let u = DiscretizationScheme::ud(0.0, 10.0, 5).unwrap();
        assert_eq!(u.decode(2).unwrap(), 5.0);
        // linear midpoint of [0, 9] in meters
        assert!((s.decode_with(0, Midpoint::Linear).unwrap() - 4.5).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_consistency() {
        for s in [
            DiscretizationScheme::sid(0.0, 40.0, 64).unwrap(),
            DiscretizationScheme::ud(0.0, 40.0, 64).unwrap(),
            DiscretizationScheme::sid(3.0, 7.0, 9).unwrap(),
        ] {
            for d in 0..s.k() {
                assert_eq!(s.encode(s.decode(d).unwrap()).unwrap(), d);
            }
        }
    }

    #[test]
    fn encode_map_midpoints_in_order() {
        let s = DiscretizationScheme::sid(0.0, 40.0, 8).unwrap();
        let mids: Vec<f32> = (0..8).map(|d| s.decode(d).unwrap() as f32).collect();
        let g = RasterGrid::new(8, 1, mids).unwrap();
        let m = s.encode_map(&g).unwrap();
        assert_eq!(m.classes(), &[0, 1, 2, 3, 4, 5, 6, 7]);

        let zeros = RasterGrid::filled(3, 2, 0.0).unwrap();
        assert!(s.encode_map(&zeros).unwrap().classes().iter().all(|&c| c == 0));
    }

    #[test]
    fn encode_map_matches_elementwise() {
        let s = DiscretizationScheme::sid(0.0, 40.0, 16).unwrap();
        let mut rng = SplitMix64::new(11);
        for _ in 0..5 {
            let data: Vec<f32> = (0..17 * 13).map(|_| rng.uniform(0.0, 50.0) as f32).collect();
            let grid = RasterGrid::new(17, 13, data).unwrap();
            let m = s.encode_map(&grid).unwrap();
            for (v, c) in grid.data().iter().zip(m.classes()) {
                assert_eq!(s.encode(*v as f64).unwrap(), *c as usize);
            }
        }
    }

    #[test]
    fn encode_map_rejects_nodata() {
        let s = DiscretizationScheme::sid(0.0, 40.0, 16).unwrap();
        let g = RasterGrid::new(2, 1, vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(s.encode_map(&g), Err(Error::NoData(_))));
    }

    #[test]
    fn sid_bins_widen() {
        let s = DiscretizationScheme::sid(0.0, 40.0, 32).unwrap();
        let widths: Vec<f64> = (0..32)
            .map(|d| {
                let (lo, hi) = s.bin_edges(d);
                hi - lo
            })
            .collect();
        assert!(widths.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn scheme_bytes_round_trip() {
        let s = DiscretizationScheme::sid(0.5, 40.0, 16).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), DiscretizationScheme::ENCODED_LEN);
        assert_eq!(DiscretizationScheme::from_bytes(&bytes).unwrap(), s);
    }
}
