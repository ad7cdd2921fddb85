//! Self-describing binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 4 bytes  magic "GRNT"
//! u8       dtype code (1 = f32, 2 = f64)
//! u8       rank
//! u64      extent, repeated rank times
//! ...      elements, row-major, little-endian
//! ```

use std::path::Path;

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GRNT";

pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a tensor of element type `T`; a file holding the other float
/// width is an error rather than a silent conversion.
pub fn decode_tensor<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |m: &str| Error::Integrity(format!("tensor file: {m}"));
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| bad("unknown dtype code"))?;
    if dtype != T::DTYPE {
        return Err(bad(&format!("holds {dtype:?}, expected {:?}", T::DTYPE)));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> =
        bytes[6..header].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("extent overflow"))?;
    let width = dtype.size();
    if bytes.len() != header + numel * width {
        return Err(bad(&format!("expected {} data bytes, found {}", numel * width, bytes.len() - header)));
    }
    let data = bytes[header..].chunks_exact(width).map(T::read_le).collect();
    Tensor::new(&shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    decode_tensor(&std::fs::read(path)?)
}
