//! 8-bit binary PGM (P5) export of `[0, 1]` planes.

use std::path::Path;

use crate::error::{Error, Result};

/// `round(255·v)` with halves rounded up.
pub fn quantize(v: f32) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
    }
    Ok((255.0 * v as f64 + 0.5).floor() as u8)
}

pub fn encode_pgm(height: usize, width: usize, values: &[f32]) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::shape(format!(
            "{} values for a {height}×{width} image",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.reserve(values.len());
    for &v in values {
        out.push(quantize(v)?);
    }
    Ok(out)
}

/// Writes a probability or uncertainty plane. Out-of-range values are an
/// error; nothing is clamped.
pub fn export_pgm(path: impl AsRef<Path>, height: usize, width: usize, values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(height, width, values)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
