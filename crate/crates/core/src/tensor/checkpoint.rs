//! Binary checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! magic        8 bytes  "PLCKPT01"
//! hash_len     u32      followed by the config hash as UTF-8
//! n_params     u32
//!   name_len   u32      followed by the parameter name as UTF-8
//!   ndim       u32
//!   dims       u64 × ndim
//!   payload    f64 × product(dims)
//! n_streams    u32
//!   name_len   u32      followed by the stream name as UTF-8
//!   seed       u64
//!   stream     u64
//!   counter    u128
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::rng::StreamState;
use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PLCKPT01";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: BTreeMap<String, Tensor>,
    pub streams: BTreeMap<String, StreamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_str(&mut out, &self.config_hash);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.streams.len() as u32).to_le_bytes());
        for (name, s) in &self.streams {
            put_str(&mut out, name);
            out.extend_from_slice(&s.seed.to_le_bytes());
            out.extend_from_slice(&s.stream.to_le_bytes());
            out.extend_from_slice(&s.counter.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let config_hash = r.string()?;
        let mut params = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.array()?));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        let mut streams = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let seed = r.u64()?;
            let stream = r.u64()?;
            let counter = u128::from_le_bytes(r.array()?);
            streams.insert(name, StreamState { seed, stream, counter });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_hash,
            params,
            streams,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized parameters only, so it identifies model
    /// state independently of stream positions.
    pub fn params_hash(&self) -> String {
        let bare = Checkpoint {
            config_hash: String::new(),
            params: self.params.clone(),
            streams: BTreeMap::new(),
        };
        hex::encode(Sha256::digest(bare.to_bytes()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}
