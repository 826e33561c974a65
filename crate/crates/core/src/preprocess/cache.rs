//! Tensor cache: `"TEN1"`, u32 count, u32 C, u32 W, u32 H, then per record
//! u8 location class, u8 severity class, u8 domain tag and C·W·H
//! little-endian f32 values.

use std::io::{Read, Write};

use super::{InputTensor, CHANNELS, HEIGHT, TENSOR_LEN, WIDTH};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"TEN1";

pub fn write_tensor_cache<W: Write>(mut w: W, tensors: &[InputTensor]) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + tensors.len() * (3 + 4 * TENSOR_LEN));
    buf.extend_from_slice(CACHE_MAGIC);
    for v in [tensors.len(), CHANNELS, WIDTH, HEIGHT] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in tensors {
        if t.data.len() != TENSOR_LEN {
            return Err(Error::Shape(format!("tensor of {} values, expected {TENSOR_LEN}", t.data.len())));
        }
        buf.extend_from_slice(&[t.location_class, t.severity_class, t.domain_tag]);
        for x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor_cache<R: Read>(mut r: R) -> Result<Vec<InputTensor>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::format("tensor cache", "bad magic or truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (count, c, w, h) = (word(1), word(2), word(3), word(4));
    if (c, w, h) != (CHANNELS, WIDTH, HEIGHT) {
        return Err(Error::format("tensor cache", format!("shape {c}×{w}×{h}, expected {CHANNELS}×{WIDTH}×{HEIGHT}")));
    }
    let stride = 3 + 4 * TENSOR_LEN;
    if bytes.len() != 20 + count * stride {
        return Err(Error::format("tensor cache", "length does not match record count"));
    }
    Ok(bytes[20..]
        .chunks_exact(stride)
        .map(|rec| InputTensor {
            location_class: rec[0],
            severity_class: rec[1],
            domain_tag: rec[2],
            data: rec[3..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
        })
        .collect())
}
