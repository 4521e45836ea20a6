//! Versioned little-endian f32 tensor container.
//!
//! Layout: magic, version, tensor count, then a directory of
//! `(name, rank, dims, offset)` entries followed by the raw f32 payload.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Parameters;

const MAGIC: &[u8; 8] = b"RUELCKPT";
const VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Serializes every tensor of `params` under its registered name.
pub fn to_bytes<P: Parameters>(params: &P) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += t.len() as u64;
    }
    for (_, t) in &tensors {
        for &x in &t.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

/// Fills `params` from bytes written by [`to_bytes`]. Names, order and
/// shapes must match the target exactly.
pub fn from_bytes<P: Parameters>(bytes: &[u8], params: &mut P, origin: &Path) -> Result<()> {
    let bad = |msg: String| Error::format(origin, msg);
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32().ok_or_else(|| bad("truncated header".into()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32().ok_or_else(|| bad("truncated header".into()))? as usize;
    let mut targets = params.tensors_mut();
    if count != targets.len() {
        return Err(bad(format!("checkpoint holds {count} tensors, model expects {}", targets.len())));
    }
    let mut offsets = Vec::with_capacity(count);
    for (name, t) in targets.iter() {
        let trunc = || bad("truncated directory".into());
        let n = c.u32().ok_or_else(trunc)? as usize;
        let stored = c.take(n).ok_or_else(trunc)?;
        if stored != name.as_bytes() {
            return Err(bad(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(stored)
            )));
        }
        let rank = c.u32().ok_or_else(trunc)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64().ok_or_else(trunc)? as usize);
        }
        if shape != t.shape {
            return Err(bad(format!("tensor {name}: shape {shape:?} does not match model {:?}", t.shape)));
        }
        offsets.push(c.u64().ok_or_else(trunc)? as usize);
    }
    let payload = &bytes[c.pos..];
    let total: usize = targets.iter().map(|(_, t)| t.len()).sum();
    if payload.len() != total * 4 {
        return Err(bad(format!("payload is {} bytes, expected {}", payload.len(), total * 4)));
    }
    for ((name, t), off) in targets.iter_mut().zip(offsets) {
        let start = off * 4;
        let chunk = payload
            .get(start..start + t.len() * 4)
            .ok_or_else(|| bad(format!("tensor {name}: offset out of range")))?;
        for (x, b) in t.data.iter_mut().zip(chunk.chunks_exact(4)) {
            *x = f32::from_le_bytes(b.try_into().unwrap()) as f64;
        }
    }
    Ok(())
}

pub fn save<P: Parameters>(path: &Path, params: &P) -> Result<()> {
    std::fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_into<P: Parameters>(path: &Path, params: &mut P) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, params, path)
}
