//! Flat binary parameter files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "EUDA" | version | { name_len | name (UTF-8) | rank | dim * rank | f64 LE * prod(dims) } *
//! ```
//!
//! Entries run until end of file.

use std::path::Path;

use indexmap::IndexMap;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EUDA";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, tensor) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            kind: "checkpoint",
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses checkpoint bytes. `origin` is only used in error messages.
pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<IndexMap<String, Tensor>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path: origin,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let mut out = IndexMap::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = match std::str::from_utf8(r.take(len)?) {
            Ok(s) => s.to_owned(),
            Err(_) => return Err(r.err("parameter name is not UTF-8")),
        };
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| r.err("dims overflow"))?;
        let payload = r.take(count.checked_mul(8).ok_or_else(|| r.err("payload overflow"))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if out.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(r.err(format!("duplicate parameter {name}")));
        }
    }
    Ok(out)
}

pub fn write_checkpoint<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(entries))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<IndexMap<String, Tensor>> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, path)
}
