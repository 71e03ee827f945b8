//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"VSNN" | version: u32 | count: u32
//! per tensor: name_len: u32 | name: UTF-8 | rank: u32 | dims: u64 × rank | values: f64 × Π dims
//! ```

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VSNN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for nt in tensors {
        let name = nt.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = nt.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in nt.tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<NamedTensor>, String> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| format!("tensor name: {e}"))?
            .to_owned();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(c.u64()?).map_err(|e| e.to_string())?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format!("{name}: shape overflow"))?;
        let raw = c.take(n.checked_mul(8).ok_or("payload overflow")?)?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, values).map_err(|e| e.to_string())?;
        out.push(NamedTensor { name, tensor });
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    crate::fsutil::write_atomic(path, &encode(tensors))
}

pub fn load_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|message| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}
