//! XTEN: the on-disk tensor container.
//!
//! Layout, all little-endian:
//! magic `XTEN`, u8 version (1), u8 dtype code (0 = f32, 1 = u8, 2 = i32),
//! u8 rank, u8 zero padding, rank x u32 dims, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Tensor};

pub const MAGIC: [u8; 4] = *b"XTEN";
pub const VERSION: u8 = 1;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let rank = tensor.rank();
    assert!(rank <= u8::MAX as usize, "rank {rank} exceeds container limit");
    let mut out = Vec::with_capacity(8 + rank * 4 + tensor.byte_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(tensor.dtype().code());
    out.push(rank as u8);
    out.push(0);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match tensor.dtype() {
        Dtype::F32 => {
            for &v in tensor.as_f32().expect("dtype checked") {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::U8 => out.extend_from_slice(tensor.as_u8().expect("dtype checked")),
        Dtype::I32 => {
            for &v in tensor.as_i32().expect("dtype checked") {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |msg: String| Error::format(origin, msg);
    if bytes.len() < 8 {
        return Err(fail("truncated XTEN header".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(fail("bad magic, not an XTEN file".into()));
    }
    if bytes[4] != VERSION {
        return Err(fail(format!("unsupported XTEN version {}", bytes[4])));
    }
    let dtype = Dtype::from_code(bytes[5])
        .ok_or_else(|| fail(format!("unknown dtype code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(fail("nonzero header padding".into()));
    }
    let dims_end = 8 + rank * 4;
    if bytes.len() < dims_end {
        return Err(fail("truncated dims".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = u32::from_le_bytes(bytes[8 + i * 4..8 + i * 4 + 4].try_into().unwrap());
        if d == 0 {
            return Err(fail("zero dimension".into()));
        }
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    if payload.len() != numel * dtype.size_bytes() {
        return Err(fail(format!(
            "payload length {} does not match shape {:?} ({} bytes expected)",
            payload.len(),
            shape,
            numel * dtype.size_bytes()
        )));
    }
    Ok(match dtype {
        Dtype::F32 => Tensor::from_f32(
            &shape,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U8 => Tensor::from_u8(&shape, payload.to_vec()),
        Dtype::I32 => Tensor::from_i32(
            &shape,
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    })
}

pub fn write(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
