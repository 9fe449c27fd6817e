//! RIFF/WAVE, PCM 16-bit little-endian, mono.

use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{io_err, Error, Result};

const SCALE: f64 = 32767.0;

pub fn encode(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * SCALE).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

fn bad(msg: &str) -> Error {
    Error::Dsp(format!("wav: {msg}"))
}

pub fn decode(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let mut pos = 12;
    let mut rate = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(pos + 4) as usize;
        let body = pos + 8;
        if body + len > bytes.len() {
            return Err(bad("truncated chunk"));
        }
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(bad("short fmt chunk"));
                }
                let (format, channels, bits) = (u16_at(body), u16_at(body + 2), u16_at(body + 14));
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(bad(&format!("only mono 16-bit PCM is supported (format {format}, {channels} channels, {bits} bits)")));
                }
                rate = Some(u32_at(body + 4));
            }
            b"data" => {
                let rate = rate.ok_or_else(|| bad("data chunk before fmt chunk"))?;
                let samples = bytes[body..body + len].chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / SCALE).collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        pos = body + len + (len & 1);
    }
    Err(bad("no data chunk"))
}

pub fn write(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(w)).map_err(io_err(path))
}

pub fn read(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(io_err(path))?)
}

/// Rounds samples to the 16-bit grid, i.e. what a write/read cycle yields.
pub fn quantize(w: &Waveform) -> Waveform {
    Waveform { samples: w.samples.iter().map(|&s| (s.clamp(-1.0, 1.0) * SCALE).round() / SCALE).collect(), sample_rate: w.sample_rate }
}
