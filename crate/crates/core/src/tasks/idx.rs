//! IDX tensor files: `00 00 <type> <ndim>`, big-endian u32 dims, big-endian
//! payload. Type `0x0D` is float64, `0x0C` is int32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TYPE_F64: u8 = 0x0D;
pub const TYPE_I32: u8 = 0x0C;

/// Contents of an IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    F64(Tensor),
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl IdxData {
    pub fn shape(&self) -> &[usize] {
        match self {
            IdxData::F64(t) => t.shape(),
            IdxData::I32 { shape, .. } => shape,
        }
    }
}

fn header(kind: u8, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::size(format!("{} dimensions do not fit an IDX header", shape.len())));
    }
    let mut out = vec![0, 0, kind, shape.len() as u8];
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::size(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    Ok(out)
}

/// Serializes to bytes.
pub fn encode(data: &IdxData) -> Result<Vec<u8>> {
    match data {
        IdxData::F64(t) => {
            if let Some(v) = t.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("cannot write non-finite value {v}")));
            }
            let mut out = header(TYPE_F64, t.shape())?;
            out.reserve(t.len() * 8);
            t.data().iter().for_each(|v| out.extend_from_slice(&v.to_be_bytes()));
            Ok(out)
        }
        IdxData::I32 { shape, data } => {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::size(format!("{} values for shape {shape:?}", data.len())));
            }
            let mut out = header(TYPE_I32, shape)?;
            data.iter().for_each(|v| out.extend_from_slice(&v.to_be_bytes()));
            Ok(out)
        }
    }
}

/// Parses bytes; every failure reports the byte offset where it was found.
pub fn decode(bytes: &[u8]) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "truncated IDX header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        let off = if bytes[0] != 0 { 0 } else { 1 };
        return Err(Error::format(off, "bad IDX magic"));
    }
    let kind = bytes[2];
    let width = match kind {
        TYPE_F64 => 8,
        TYPE_I32 => 4,
        other => return Err(Error::format(2, format!("unsupported IDX type byte {other:#04x}"))),
    };
    let ndim = bytes[3] as usize;
    let body = 4 + 4 * ndim;
    if bytes.len() < body {
        return Err(Error::format(bytes.len() as u64, "truncated IDX dimensions"));
    }
    let shape: Vec<usize> =
        bytes[4..body].chunks_exact(4).map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize).collect();
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format(4, "IDX dimensions overflow"))?;
    let expected = count
        .checked_mul(width)
        .and_then(|p| p.checked_add(body))
        .ok_or_else(|| Error::format(4, "IDX dimensions overflow"))?;
    if bytes.len() < expected {
        return Err(Error::format(bytes.len() as u64, format!("truncated IDX payload, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(Error::format(expected as u64, "trailing bytes after IDX payload"));
    }
    let payload = &bytes[body..];
    match kind {
        TYPE_F64 => {
            let data = payload.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| Error::format(4, e.to_string()))?;
            Ok(IdxData::F64(t))
        }
        _ => {
            let data = payload.chunks_exact(4).map(|c| i32::from_be_bytes(c.try_into().unwrap())).collect();
            Ok(IdxData::I32 { shape, data })
        }
    }
}

pub fn write_idx(path: &Path, data: &IdxData) -> Result<()> {
    let bytes = encode(data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_idx(path: &Path) -> Result<IdxData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
