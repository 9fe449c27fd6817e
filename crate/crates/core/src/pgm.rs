//! 8-bit binary PGM export of spectrograms.

use std::path::Path;

use crate::dsp::Matrix;
use crate::error::{io_err, Result};

/// Frames run left to right, low frequencies at the bottom.
pub fn encode(m: &Matrix) -> Vec<u8> {
    let (lo, hi) = m.min_max();
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", m.rows, m.cols).into_bytes();
    for c in (0..m.cols).rev() {
        for r in 0..m.rows {
            let v = if span > 0.0 { 255.0 * (m.get(r, c) - lo) / span } else { 0.0 };
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn write(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(m)).map_err(io_err(path))
}
