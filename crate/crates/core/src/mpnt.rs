//! MPNT flat binary tensor format: magic "MPNT", version u32, rank u32,
//! extents as u64, then little-endian f64 values in row-major order.

use alloc::vec::Vec;

use crate::error::{invalid_err, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MPNT";
pub const VERSION: u32 = 1;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + tensor.shape().len() * 8 + tensor.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let take = |at: usize, len: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + len)
            .ok_or_else(|| invalid_err!("truncated MPNT payload at offset {}", at))
    };
    if take(0, 4)? != MAGIC {
        return Err(invalid_err!("bad MPNT magic"));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(invalid_err!("unsupported MPNT version {}", version));
    }
    let rank = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut at = 12;
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(at, 8)?.try_into().unwrap()) as usize);
        at += 8;
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f64::from_le_bytes(take(at, 8)?.try_into().unwrap()));
        at += 8;
    }
    if at != bytes.len() {
        return Err(invalid_err!("{} trailing bytes after MPNT payload", bytes.len() - at));
    }
    Tensor::new(&shape, data)
}
