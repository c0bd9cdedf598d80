//! The PFMT tensor container.
//!
//! Layout, all little-endian:
//!
//! | bytes      | content                         |
//! |------------|---------------------------------|
//! | 0..4       | magic `PFMT`                    |
//! | 4          | version, 0x01                   |
//! | 5          | dtype, 0x01 = f64               |
//! | 6..10      | ndim as u32                     |
//! | 10..10+4n  | each extent as u32              |
//! | rest       | row-major f64 payload           |
//!
//! Decoding failures report the byte offset at which they occurred.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PFMT";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F64: u8 = 0x01;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(10 + 4 * t.shape().len() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F64);
    let ndim = u32::try_from(t.shape().len())
        .map_err(|_| Error::Contract("tensor rank exceeds u32".into()))?;
    out.extend_from_slice(&ndim.to_le_bytes());
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Contract("extent exceeds u32".into()))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let fail = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(fail(0, format!("bad magic, expected {:?}", MAGIC)));
    }
    if bytes.len() < 5 {
        return Err(fail(4, "missing version byte".into()));
    }
    if bytes[4] != VERSION {
        return Err(fail(4, format!("unsupported version 0x{:02x}", bytes[4])));
    }
    if bytes.len() < 6 {
        return Err(fail(5, "missing dtype byte".into()));
    }
    if bytes[5] != DTYPE_F64 {
        return Err(fail(5, format!("unsupported dtype 0x{:02x}", bytes[5])));
    }
    if bytes.len() < 10 {
        return Err(fail(6, "truncated ndim field".into()));
    }
    let ndim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut off = 10;
    for i in 0..ndim {
        if bytes.len() < off + 4 {
            return Err(fail(off, format!("truncated extent {i} of {ndim}")));
        }
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        off += 4;
    }
    let numel: usize = shape.iter().product();
    let expected = numel * 8;
    let actual = bytes.len() - off;
    if actual != expected {
        return Err(fail(
            off,
            format!("payload length mismatch: expected {expected} bytes, got {actual}"),
        ));
    }
    let data: Vec<f64> = bytes[off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}
