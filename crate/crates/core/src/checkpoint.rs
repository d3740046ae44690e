//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"ADAMOGE1"            magic
//! [u8; 32]               config fingerprint
//! u32                    entry count
//! per entry:
//!   u32, [u8]            name length and UTF-8 name
//!   u32, [u64]           rank and dimensions
//!   [f64]                values, row-major
//! ```
//!
//! Entries are the model parameters plus `data.norm.mean` and
//! `data.norm.std`.

use std::path::Path;

use log::warn;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::moge::AdaMoGe;
use crate::ndmath::Tensor;
use crate::training::hex;

pub const MAGIC: &[u8; 8] = b"ADAMOGE1";
pub const NORM_MEAN: &str = "data.norm.mean";
pub const NORM_STD: &str = "data.norm.std";

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub entries: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

impl Checkpoint {
    /// Snapshot of `model` with the normalization used to train it.
    pub fn from_model(model: &AdaMoGe, stats: &NormStats, fingerprint: [u8; 32]) -> Self {
        let mut entries: Vec<(String, Tensor)> = model
            .store
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        entries.push((NORM_MEAN.into(), Tensor::vector(stats.mean.clone())));
        entries.push((NORM_STD.into(), Tensor::vector(stats.std.clone())));
        Checkpoint { fingerprint, entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let fingerprint: [u8; 32] = r.take(32, "fingerprint")?.try_into().unwrap();
        let count = r.u32("entry count")?;
        let mut entries = Vec::new();
        for i in 0..count {
            let len = r.u32("name length")?;
            if len > MAX_NAME {
                return Err(Error::Checkpoint(format!("entry {i}: name length {len} too large")));
            }
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Checkpoint(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32("rank")?;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("`{name}`: rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64("dimension")?).map_err(|_| {
                    Error::Checkpoint(format!("`{name}`: dimension overflows"))
                })?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}`: size overflows")))?;
            let raw = r.take(n, "values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last entry",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint { fingerprint, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Errors on a fingerprint mismatch unless `allow` is set.
    pub fn check_fingerprint(&self, expected: &[u8; 32], allow: bool) -> Result<()> {
        if &self.fingerprint == expected {
            return Ok(());
        }
        let (expected, found) = (hex(expected), hex(&self.fingerprint));
        if allow {
            warn!("fingerprint mismatch allowed: checkpoint {found}, config {expected}");
            Ok(())
        } else {
            Err(Error::FingerprintMismatch { expected, found })
        }
    }

    /// Copies every parameter of `model` from the checkpoint.
    pub fn restore(&self, model: &mut AdaMoGe) -> Result<()> {
        for p in model.store.iter_mut() {
            let t = self
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}`: checkpoint shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        let extra: Vec<&str> = self
            .entries
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| !n.starts_with("data.") && model.store.by_name(n).is_none())
            .collect();
        if !extra.is_empty() {
            return Err(Error::Checkpoint(format!("unknown entries {extra:?}")));
        }
        Ok(())
    }

    pub fn norm_stats(&self) -> Result<NormStats> {
        let get = |n: &str| {
            self.get(n)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing `{n}`")))
        };
        let stats = NormStats {
            mean: get(NORM_MEAN)?,
            std: get(NORM_STD)?,
        };
        if stats.mean.len() != stats.std.len() {
            return Err(Error::Checkpoint("normalization vectors differ in length".into()));
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moge::LayerConfig;

    fn model() -> AdaMoGe {
        AdaMoGe::new(LayerConfig::new(16, 8, 2, 3), 5).unwrap()
    }

    fn stats() -> NormStats {
        NormStats {
            mean: vec![0.1, -2.5],
            std: vec![1.0, 1e-8],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let ck = Checkpoint::from_model(&m, &stats(), [7; 32]);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.fingerprint, ck.fingerprint);
        assert_eq!(back.entries.len(), ck.entries.len());
        for ((n1, t1), (n2, t2)) in back.entries.iter().zip(&ck.entries) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        let mut fresh = AdaMoGe::new(m.config.clone(), 99).unwrap();
        back.restore(&mut fresh).unwrap();
        assert_eq!(fresh.store, m.store);
        assert_eq!(back.norm_stats().unwrap(), stats());
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint {
            fingerprint: [1; 32],
            entries: vec![("x".into(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())],
        };
        let b = ck.to_bytes();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[40..44], &1u32.to_le_bytes());
        assert_eq!(&b[44..48], &1u32.to_le_bytes());
        assert_eq!(b[48], b'x');
        assert_eq!(b.len(), 8 + 32 + 4 + 4 + 1 + 4 + 8 + 16);
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint::from_model(&model(), &stats(), [0; 32]);
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn fingerprint_policy() {
        let ck = Checkpoint::from_model(&model(), &stats(), [3; 32]);
        assert!(ck.check_fingerprint(&[3; 32], false).is_ok());
        let err = ck.check_fingerprint(&[4; 32], false).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }));
        assert!(ck.check_fingerprint(&[4; 32], true).is_ok());
    }

    #[test]
    fn restore_rejects_other_shapes() {
        let ck = Checkpoint::from_model(&model(), &stats(), [0; 32]);
        let mut other = AdaMoGe::new(LayerConfig::new(16, 12, 2, 3), 5).unwrap();
        assert!(ck.restore(&mut other).is_err());
    }
}
