//! Binary checkpoint files.
//!
//! ```text
//! "ORDN"                     4 bytes
//! version                    u32 (currently 1)
//! config block               61 bytes, see NetConfig::to_bytes
//! scheme block               21 bytes: kind u8, a f64, b f64, K u32
//! tensor count               u32
//! per tensor:
//!   name length              u16
//!   name                     UTF-8
//!   rank                     u8
//!   dims                     rank x u32
//!   payload                  little-endian f32, row-major
//! ```
//!
//! Optimizer state, when present, is stored as extra tensors: `adam.m.<param>`,
//! `adam.v.<param>` and `adam.step`, a rank-1 pair of f32 whose bit patterns
//! are the low and high halves of the u64 step counter.

use std::fs;
use std::path::Path;

use crate::discretize::DiscretizationScheme;
use crate::error::{Error, Result};
use crate::net::model::{NetConfig, OrdinalNet};
use crate::net::tensor::Tensor;
use crate::trainer::AdamState;

pub const MAGIC: &[u8; 4] = b"ORDN";
pub const VERSION: u32 = 1;
const STEP_NAME: &str = "adam.step";
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub scheme: DiscretizationScheme,
    /// Model parameters by name, in registry order.
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn from_model(
        net: &OrdinalNet<f32>,
        scheme: &DiscretizationScheme,
        optimizer: Option<&AdamState<f32>>,
    ) -> Self {
        Self {
            config: net.config().clone(),
            scheme: scheme.clone(),
            tensors: net
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_model(&self) -> Result<OrdinalNet<f32>> {
        OrdinalNet::from_named(self.config.clone(), self.tensors.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.to_bytes());
        out.extend_from_slice(&self.scheme.to_bytes());

        let mut all: Vec<(String, &[usize], &[f32])> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape(), t.data()))
            .collect();
        let step_bits;
        if let Some(opt) = &self.optimizer {
            for ((name, t), (m, v)) in self.tensors.iter().zip(opt.m.iter().zip(&opt.v)) {
                all.push((format!("{M_PREFIX}{name}"), t.shape(), m));
                all.push((format!("{V_PREFIX}{name}"), t.shape(), v));
            }
            step_bits = [
                f32::from_bits(opt.step as u32),
                f32::from_bits((opt.step >> 32) as u32),
            ];
            all.push((STEP_NAME.to_string(), &[2], &step_bits));
        }
        out.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (name, shape, data) in all {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = NetConfig::from_bytes(r.take(NetConfig::ENCODED_LEN)?)?;
        let scheme = DiscretizationScheme::from_bytes(r.take(DiscretizationScheme::ENCODED_LEN)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        let mut moments_m = Vec::new();
        let mut moments_v = Vec::new();
        let mut step = None;
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("tensor {name:?} dimensions overflow")))?;
            let data: Vec<f32> = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if name == STEP_NAME {
                if data.len() != 2 {
                    return Err(Error::Format("malformed optimizer step".into()));
                }
                step = Some(data[0].to_bits() as u64 | (data[1].to_bits() as u64) << 32);
            } else if let Some(p) = name.strip_prefix(M_PREFIX) {
                moments_m.push((p.to_string(), data));
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                moments_v.push((p.to_string(), data));
            } else {
                tensors.push((name, Tensor::from_vec(&shape, data)?));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        let optimizer = match step {
            None if moments_m.is_empty() && moments_v.is_empty() => None,
            None => return Err(Error::Format("optimizer moments without step counter".into())),
            Some(step) => {
                let lookup = |moments: &mut Vec<(String, Vec<f32>)>, name: &str| {
                    let i = moments
                        .iter()
                        .position(|(n, _)| n == name)
                        .ok_or_else(|| Error::Format(format!("missing optimizer moment for {name:?}")))?;
                    Ok::<_, Error>(moments.swap_remove(i).1)
                };
                let mut m = Vec::with_capacity(tensors.len());
                let mut v = Vec::with_capacity(tensors.len());
                for (name, t) in &tensors {
                    let mm = lookup(&mut moments_m, name)?;
                    let vv = lookup(&mut moments_v, name)?;
                    if mm.len() != t.numel() || vv.len() != t.numel() {
                        return Err(Error::Format(format!("optimizer moment size mismatch for {name:?}")));
                    }
                    m.push(mm);
                    v.push(vv);
                }
                Some(AdamState { step, m, v })
            }
        };
        let ckpt = Self {
            config,
            scheme,
            tensors,
            optimizer,
        };
        // reject parameter sets that do not fit the declared architecture
        ckpt.to_model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::HeadKind;

    fn sample() -> (OrdinalNet<f32>, DiscretizationScheme) {
        let cfg = NetConfig::tiny(4);
        (
            OrdinalNet::new(cfg, 17).unwrap(),
            DiscretizationScheme::sid(0.0, 40.0, 4).unwrap(),
        )
    }

    #[test]
    fn round_trip_without_optimizer() {
        let (net, scheme) = sample();
        let ck = Checkpoint::from_model(&net, &scheme, None);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"ORDN");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap().params(), net.params());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn round_trip_with_optimizer() {
        let (net, scheme) = sample();
        let mut state = AdamState::new(net.params());
        state.step = (7u64 << 32) | 0x7FC0_0001;
        state.m[0][0] = 0.25;
        state.v[1][0] = 3.0;
        let ck = Checkpoint::from_model(&net, &scheme, Some(&state));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.optimizer.as_ref().unwrap().step, state.step);
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_corruption() {
        let (net, scheme) = sample();
        let bytes = Checkpoint::from_model(&net, &scheme, None).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn rejects_mismatched_architecture() {
        let (net, scheme) = sample();
        let mut ck = Checkpoint::from_model(&net, &scheme, None);
        ck.config.head = HeadKind::Mse;
        assert!(Checkpoint::from_bytes(&ck.to_bytes()).is_err());
    }
}
