//! Binary tensor container (`.dtk`).
//!
//! Layout, all integers little-endian:
//!
//! | bytes      | content                         |
//! |------------|---------------------------------|
//! | 4          | magic `DTK1`                    |
//! | 1          | dtype code, 0 = f32, 1 = f64    |
//! | 4          | ndim (u32)                      |
//! | 4 * ndim   | dims (u32 each)                 |
//! | rest       | row-major values                |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"DTK1";

pub fn encode<F: Real>(tensor: &Tensor<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * tensor.shape().len() + tensor.len() * F::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(F::DTYPE as u8);
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a container whose dtype must match `F` exactly.
pub fn decode<F: Real>(bytes: &[u8], origin: &Path) -> Result<Tensor<F>> {
    let corrupt = |reason: String| Error::CorruptContainer {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic bytes".into()));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| corrupt(format!("unknown dtype code {}", bytes[4])))?;
    if dtype != F::DTYPE {
        return Err(corrupt(format!("expected {:?}, found {dtype:?}", F::DTYPE)));
    }
    let ndim = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header = 9 + 4 * ndim;
    if bytes.len() < header {
        return Err(corrupt("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[9..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| corrupt("dimension overflow".into()))?;
    let width = dtype.size();
    let expected = numel
        .checked_mul(width)
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| corrupt("dimension overflow".into()))?;
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "expected {expected} bytes for shape {shape:?}, found {}",
            bytes.len()
        )));
    }
    let data = bytes[header..].chunks_exact(width).map(F::read_le).collect();
    Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))
}

pub fn write<F: Real>(path: &Path, tensor: &Tensor<F>) -> Result<()> {
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read<F: Real>(path: &Path) -> Result<Tensor<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
