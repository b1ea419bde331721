//! The `FAST` tensor container: magic `FAST`, version byte 1, rank byte,
//! little-endian `u32` extents, then little-endian `f64` payload in row-major
//! order. Several records may be concatenated in one file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FAST";
pub const VERSION: u8 = 1;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

pub fn encode(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes
        .get(at..at + n)
        .ok_or_else(|| parse_err(bytes.len(), format!("truncated {what}: needed {n} bytes at offset {at}")))
}

/// Decodes one record starting at `offset`; returns the tensor and the offset
/// just past it.
pub fn decode(bytes: &[u8], offset: usize) -> Result<(Tensor, usize)> {
    let magic = take(bytes, offset, 4, "magic")?;
    if magic != MAGIC {
        return Err(parse_err(offset, format!("bad magic {magic:?}")));
    }
    let version = take(bytes, offset + 4, 1, "version")?[0];
    if version != VERSION {
        return Err(parse_err(offset + 4, format!("unsupported version {version}")));
    }
    let rank = take(bytes, offset + 5, 1, "rank")?[0] as usize;
    let mut at = offset + 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = take(bytes, at, 4, "extent")?;
        shape.push(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize);
        at += 4;
    }
    let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
    let nbytes = count
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| parse_err(offset + 6, "extents overflow"))?;
    let payload = take(bytes, at, nbytes, "payload")?;
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let t = Tensor::from_vec(&shape, data).map_err(|e| parse_err(offset + 5, e.to_string()))?;
    Ok((t, at + nbytes))
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 8 * t.len());
    encode(t, &mut out);
    out
}

/// Decodes a buffer holding exactly one record.
pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let (t, end) = decode(bytes, 0)?;
    if end != bytes.len() {
        return Err(parse_err(end, format!("{} trailing bytes", bytes.len() - end)));
    }
    Ok(t)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    from_bytes(&std::fs::read(path)?)
}
