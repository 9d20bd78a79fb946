//! Binary tensor container shared by checkpoints, datasets and samples.
//!
//! Layout (little-endian): magic `ICDT`, version `u32`, tensor count `u32`,
//! then per tensor: name length `u32`, UTF-8 name, rank `u32`, `rank` dims as
//! `u64`, dtype tag `u8` (0 = f32) and the payload. Values are stored as f32,
//! so a round trip reproduces `x as f32` exactly.

use std::fs;
use std::path::Path;

use crate::backbone::ParamStore;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"ICDT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// Serializes named tensors to bytes.
pub fn encode_tensors<'a, I>(entries: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let entries: Vec<(&str, &Tensor)> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "truncated container: needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses a container. Either every tensor is returned or an error is.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a tensor container".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = c.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        if rank > c.remaining() / 8 {
            return Err(Error::Format(format!("tensor {name}: rank {rank} exceeds file size")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        let dtype = c.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor {name}: unknown dtype tag {dtype}")));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| Error::Format(format!("tensor {name}: shape {shape:?} overflows")))?;
        let payload = c.take(numel * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if c.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after last tensor", c.remaining())));
    }
    Ok(out)
}

pub fn save_tensors<'a, I>(path: &Path, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    fs::write(path, encode_tensors(entries))?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_tensors(&fs::read(path)?)
}

/// Loads a single tensor stored under `name`.
pub fn load_tensor(path: &Path, name: &str) -> Result<Tensor> {
    load_tensors(path)?
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("{} has no tensor named {name}", path.display())))
}

pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    save_tensors(path, params.iter())
}

/// Replaces every parameter from the checkpoint at `path`; on any error the
/// store is left untouched.
pub fn load_checkpoint(path: &Path, params: &mut ParamStore) -> Result<()> {
    params.load_named(&load_tensors(path)?)
}
