//! Per-trial binary format: `"VBI1"`, u32 channel count, u32 sample count,
//! u32 sample rate (Hz), then channel-major little-endian f32 samples.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VBI1";

pub fn write_channels<W: Write>(mut w: W, channels: &[Vec<f64>], sample_rate_hz: f64) -> Result<()> {
    let samples = channels.first().map_or(0, Vec::len);
    if channels.iter().any(|c| c.len() != samples) {
        return Err(Error::Shape("channels of unequal length".into()));
    }
    let rate = sample_rate_hz.round();
    if (rate - sample_rate_hz).abs() > 1e-9 || !(1.0..=u32::MAX as f64).contains(&rate) {
        return Err(Error::InvalidConfig(format!("sample rate {sample_rate_hz} is not a storable integer")));
    }
    let mut buf = Vec::with_capacity(16 + 4 * samples * channels.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(channels.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(samples as u32).to_le_bytes());
    buf.extend_from_slice(&(rate as u32).to_le_bytes());
    for c in channels {
        for &x in c {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Returns the channels widened back to f64 and the sample rate.
pub fn read_channels<R: Read>(mut r: R) -> Result<(Vec<Vec<f64>>, f64)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::format("trial record", "bad magic or truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (n_ch, n_s, rate) = (word(1), word(2), word(3));
    if bytes.len() != 16 + 4 * n_ch * n_s {
        return Err(Error::format("trial record", format!("expected {} data bytes, found {}", 4 * n_ch * n_s, bytes.len() - 16)));
    }
    let data = &bytes[16..];
    let channels = (0..n_ch)
        .map(|c| {
            (0..n_s)
                .map(|s| {
                    let o = 4 * (c * n_s + s);
                    f32::from_le_bytes(data[o..o + 4].try_into().unwrap()) as f64
                })
                .collect()
        })
        .collect();
    Ok((channels, rate as f64))
}
