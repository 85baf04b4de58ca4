//! DMT1 tensor files.
//!
//! Layout: the four bytes `DMT1`, a `u8` rank, `rank` little-endian `u32`
//! dimensions, then the row-major payload as little-endian `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DMT1";

pub fn write_dmt<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| TensorError::Format("rank above 255".into()))?;
    let mut buf = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dmt<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(TensorError::Format("missing DMT1 magic".into()));
    }
    let rank = bytes[4] as usize;
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(TensorError::Format("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    if bytes.len() != header + 4 * numel {
        return Err(TensorError::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            4 * numel
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_dmt(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}
