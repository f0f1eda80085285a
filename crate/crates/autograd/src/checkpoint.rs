//! Versioned binary checkpoints of named f32 arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "VASECKPT"
//! version     u32      = 1
//! hash        u32 len + utf8   architecture/config hash
//! meta        u32 count, then (u32 len + utf8 key, u32 len + utf8 value)*
//! arrays      u32 count, then per array:
//!               u32 len + utf8 name, u32 ndim, u64 dims[ndim], f32 data[prod(dims)]
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::array::Array;
use crate::store::ParamStore;

pub const MAGIC: &[u8; 8] = b"VASECKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint contains invalid utf-8")]
    Utf8,
    #[error("config hash mismatch: checkpoint has {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: ParamStore<f32>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Utf8)
    }
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>, arrays: ParamStore<f32>) -> Self {
        Self { config_hash: config_hash.into(), meta: BTreeMap::new(), arrays }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + self.arrays.num_scalars() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut buf, &self.config_hash);
        buf.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut buf, k);
            put_str(&mut buf, v);
        }
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in self.arrays.iter() {
            put_str(&mut buf, name);
            buf.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
            for &d in a.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in a.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config_hash = c.string()?;
        let mut meta = BTreeMap::new();
        for _ in 0..c.u32()? {
            let k = c.string()?;
            let v = c.string()?;
            meta.insert(k, v);
        }
        let mut arrays = ParamStore::new();
        for _ in 0..c.u32()? {
            let name = c.string()?;
            let nd = c.u32()? as usize;
            let mut shape = Vec::with_capacity(nd);
            for _ in 0..nd {
                shape.push(c.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = c.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            arrays.insert(name, Array::from_vec(&shape, data));
        }
        Ok(Self { config_hash, meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        if let Some(dir) = path.as_ref().parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Load and refuse on architecture hash mismatch.
    pub fn load_expecting(path: impl AsRef<Path>, expected_hash: &str) -> Result<Self, CheckpointError> {
        let ck = Self::load(path)?;
        if ck.config_hash != expected_hash {
            return Err(CheckpointError::HashMismatch { expected: expected_hash.to_string(), found: ck.config_hash });
        }
        Ok(ck)
    }
}
