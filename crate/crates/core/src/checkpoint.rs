//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "BEVF"            magic
//! u32               format version (1)
//! [u8; 32]          config hash
//! u64               training step
//! u32               tensor count
//! per tensor:
//!   u32 + bytes     name (UTF-8)
//!   u32 + u64 × n   rank and dims
//!   f64 × len       values
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BEVF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub params: ParamStore,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Load(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32], step: u64, params: ParamStore) -> Self {
        Checkpoint {
            config_hash,
            step,
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Load("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Load(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let step = r.u64()?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Load("parameter name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Load(format!("`{name}` has an absurd shape {shape:?}")))?;
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Load("tensor too large".into()))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Load(format!("`{name}`: {e}")))?;
            if params.contains(&name) {
                return Err(Error::Load(format!("duplicate tensor `{name}`")));
            }
            params.insert(name, t);
        }
        if r.pos != buf.len() {
            return Err(Error::Load(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_hash,
            step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Checks that the stored tensors have exactly the names and shapes of
    /// `expected`, in the same order.
    pub fn check_compatible(&self, expected: &ParamStore) -> Result<()> {
        if self.params.len() != expected.len() {
            return Err(Error::Load(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                expected.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.params.iter().zip(expected.iter()) {
            if a != b {
                return Err(Error::Load(format!("tensor `{a}` found where `{b}` was expected")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Load(format!(
                    "`{a}` has shape {:?}, model expects {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}
