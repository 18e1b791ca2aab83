//! PMXT tensor file format.
//!
//! Layout, all little-endian:
//!   magic  b"PMXT"
//!   u16    format version (currently 1)
//!   u16    rank
//!   u64*r  dims
//!   f32*n  payload, row-major
//!   u32    CRC32 of every preceding byte
//!
//! Values are stored as f32 and widened to f64 on load. Malformed files
//! fail with the byte offset where parsing stopped.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const PMXT_MAGIC: &[u8; 4] = b"PMXT";
pub const PMXT_VERSION: u16 = 1;

/// Refuse to allocate for absurd headers before trusting the CRC.
const MAX_RANK: usize = 8;
const MAX_NUMEL: u64 = 1 << 30;

pub fn encode_pmxt(t: &Tensor) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(12 + 8 * t.rank() + 4 * t.numel());
    bytes.extend_from_slice(PMXT_MAGIC);
    bytes.extend_from_slice(&PMXT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &d in &t.shape {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &t.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

pub fn decode_pmxt(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |offset: usize, msg: String| CoreError::Format {
        path: origin.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    let need = |offset: usize, len: usize, what: &str| -> Result<()> {
        if offset + len > bytes.len() {
            Err(fail(
                bytes.len(),
                format!("truncated while reading {what}: need {} bytes, have {}", offset + len, bytes.len()),
            ))
        } else {
            Ok(())
        }
    };
    need(0, 8, "header")?;
    if &bytes[0..4] != PMXT_MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PMXT_VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if rank > MAX_RANK {
        return Err(fail(6, format!("rank {rank} exceeds limit {MAX_RANK}")));
    }
    need(8, 8 * rank, "dims")?;
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for i in 0..rank {
        let off = 8 + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        numel = numel.saturating_mul(d.max(1)).min(u64::MAX);
        if d > MAX_NUMEL || numel > MAX_NUMEL {
            return Err(fail(off, format!("dims imply more than {MAX_NUMEL} elements")));
        }
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let payload_off = 8 + 8 * rank;
    need(payload_off, 4 * numel + 4, "payload and checksum")?;
    let crc_off = payload_off + 4 * numel;
    if bytes.len() != crc_off + 4 {
        return Err(fail(
            crc_off + 4,
            format!("{} trailing bytes after checksum", bytes.len() - crc_off - 4),
        ));
    }
    let stored = u32::from_le_bytes(bytes[crc_off..crc_off + 4].try_into().unwrap());
    let actual = crc32fast::hash(&bytes[..crc_off]);
    if stored != actual {
        return Err(fail(
            crc_off,
            format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = payload_off + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Tensor::new(shape, data)
}

pub fn write_pmxt(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pmxt(t)).map_err(|e| CoreError::io(path, e))
}

pub fn read_pmxt(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_pmxt(&bytes, path)
}
