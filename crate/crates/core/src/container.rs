//! Multi-channel float container (`.vfcs`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VFCS1"              5 bytes
//! channels, H, W       3 x u32
//! per channel: label   u16 byte length + UTF-8 bytes
//! payload              channels * H * W f32, channel-major, row-major
//! ```

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"VFCS1";

pub fn encode(labels: &[String], data: &Array3<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = data.dim();
    if labels.len() != c {
        return Err(Error::Shape(format!("{} labels for {c} channels", labels.len())));
    }
    let mut buf = Vec::with_capacity(17 + c * (h * w * 4 + 16));
    buf.extend_from_slice(MAGIC);
    for v in [c, h, w] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for l in labels {
        let bytes = l.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Shape(format!("channel label too long: {l}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
    }
    for v in data.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Vec<String>, Array3<f64>)> {
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if bytes.len() < 17 || &bytes[..5] != MAGIC {
        return Err(bad("missing VFCS1 magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (u32_at(5), u32_at(9), u32_at(13));
    let mut off = 17;
    let mut labels = Vec::with_capacity(c);
    for _ in 0..c {
        let len_bytes = bytes.get(off..off + 2).ok_or_else(|| bad("truncated label table"))?;
        let len = u16::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        off += 2;
        let raw = bytes.get(off..off + len).ok_or_else(|| bad("truncated label"))?;
        labels.push(String::from_utf8(raw.to_vec()).map_err(|_| bad("label is not UTF-8"))?);
        off += len;
    }
    let n = c * h * w;
    let payload = &bytes[off..];
    if payload.len() != n * 4 {
        return Err(bad(&format!("payload has {} bytes, expected {}", payload.len(), n * 4)));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let data = Array3::from_shape_vec((c, h, w), values).map_err(|e| bad(&e.to_string()))?;
    Ok((labels, data))
}

pub fn write(path: &Path, labels: &[String], data: &Array3<f64>) -> Result<()> {
    let bytes = encode(labels, data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Vec<String>, Array3<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
