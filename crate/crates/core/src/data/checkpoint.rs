//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CPCX" | version u32 | config_len u32 | config utf-8 | sha256(config) [32]
//! | n_arrays u32 | n_arrays × ( name_len u32 | name | dtype u8 | rank u32
//! | dims u64 × rank | payload ) | sha256(all preceding bytes) [32]
//! ```
//!
//! dtype tags: 0 = f32, 1 = f64, 2 = u8, 3 = u64.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CPCX";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U8(_) => 2,
            ArrayData::U64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    /// Canonical `key=value` text describing the model and run.
    pub config: String,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&Sha256::digest(self.config.as_bytes()));
        b.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            b.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            b.extend_from_slice(a.name.as_bytes());
            b.push(a.data.tag());
            b.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
            for &d in &a.dims {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U8(v) => b.extend_from_slice(v),
                ArrayData::U64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let sum = Sha256::digest(&b);
        b.extend_from_slice(&sum);
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "missing CPCX magic".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnknownVersion {
                found: version,
                expected: VERSION,
            });
        }
        let clen = r.u32()? as usize;
        let config_bytes = r.take(clen)?;
        let config_hash = r.take(32)?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| r.format("array name is not UTF-8"))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.format("array dimensions overflow"))?;
            let data = match tag {
                0 => ArrayData::F32(r.take(r.bytes_for(count, 4)?)?.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => ArrayData::F64(r.take(r.bytes_for(count, 8)?)?.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => ArrayData::U8(r.take(count)?.to_vec()),
                3 => ArrayData::U64(r.take(r.bytes_for(count, 8)?)?.chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                other => return Err(r.format(&format!("unknown dtype tag {other} for `{name}`"))),
            };
            arrays.push(NamedArray { name, dims, data });
        }
        let body_end = r.pos;
        let stored = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(r.format("trailing bytes after checksum"));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != stored {
            return Err(Error::ChecksumMismatch(path.to_path_buf()));
        }
        if Sha256::digest(config_bytes).as_slice() != config_hash {
            return Err(r.format("config hash does not match the stored config"));
        }
        let config = String::from_utf8(config_bytes.to_vec()).map_err(|_| r.format("config is not UTF-8"))?;
        Ok(Self { config, arrays })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("needed {n} bytes at offset {} of {}", self.pos, self.bytes.len()),
            }),
        }
    }

    fn bytes_for(&self, count: usize, width: usize) -> Result<usize> {
        count.checked_mul(width).ok_or_else(|| self.format("array size overflows"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn format(&self, detail: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: detail.to_string(),
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
