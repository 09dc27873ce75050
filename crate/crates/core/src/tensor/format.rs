//! On-disk tensor container: `L2LT` magic, a format version byte, rank byte,
//! little-endian u32 dims, then the payload as little-endian f64 words.
//! Round-trips are bit-exact, so NaN payloads and signed zeros survive.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"L2LT";
const VERSION: u8 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let shape = t.shape();
    let data = t.data();
    let mut out = Vec::with_capacity(6 + 4 * shape.len() + 8 * data.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 6 {
        return Err(format!("file too short ({} bytes)", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err(format!("bad magic {:?}", &bytes[..4]));
    }
    if bytes[4] != VERSION {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    let rank = bytes[5] as usize;
    let header_len = 6 + 4 * rank;
    if bytes.len() < header_len {
        return Err(format!("truncated header: rank {rank} needs {header_len} bytes"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 6 + 4 * i;
        let dim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        shape.push(dim as usize);
    }
    let numel: usize = shape.iter().product();
    let expected = header_len + 8 * numel;
    if bytes.len() < expected {
        return Err(format!("truncated payload: expected {expected} bytes, got {}", bytes.len()));
    }
    if bytes.len() > expected {
        return Err(format!("{} trailing bytes after payload", bytes.len() - expected));
    }
    let data: Vec<f64> = bytes[header_len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::raw(shape, data, false))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    decode_inner(bytes).map_err(|detail| Error::TensorFormatError {
        path: "<buffer>".into(),
        detail,
    })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_inner(&bytes).map_err(|detail| Error::TensorFormatError {
        path: path.display().to_string(),
        detail,
    })
}
