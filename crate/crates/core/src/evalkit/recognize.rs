//! Template recognizer for the toy language.
//!
//! Frames of 10 ms (5 ms hop) are described by cepstral coefficients of a
//! log-mel spectrum, which track the formant envelope but not the pitch, and
//! classified by cosine similarity against canonical-voice symbol templates.
//! Low-energy frames are silence; long silent runs separate words.

use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_utterance, CorpusManifest, SymbolSequence};
use crate::dsp::{mel_filterbank, Matrix, StftConfig, Waveform, Window};
use crate::error::{io_err, Error, Result};
use crate::speaker::SpeakerSpec;

pub const TEMPLATE_FILE: &str = "templates.json";

const N_MELS: usize = 24;
const N_CEPS: usize = 12;
const DYNAMIC_RANGE: f64 = 0.01;
/// Length of the window whose energy decides silence; a silent frame
/// therefore certifies a pause longer than 15 ms.
const SILENCE_SECONDS: f64 = 0.02;
/// Shorter segments are treated as transitions and dropped.
const MIN_RUN: usize = 3;
/// A local energy minimum below this fraction of both neighbouring peaks
/// separates two symbols.
const VALLEY_DEPTH: f64 = 0.25;
const TEMPLATE_RENDERS: u64 = 8;

fn analysis(sample_rate: u32) -> StftConfig {
    let ms = |x: f64| (x * sample_rate as f64 / 1000.0).round() as usize;
    let window_length = ms(10.0);
    StftConfig {
        sample_rate,
        window_length,
        hop_length: ms(5.0),
        fft_size: window_length.next_power_of_two().max(256),
        window: Window::Hann,
    }
}

/// Per-frame analysis: short-window energies and cepstra for classification,
/// long-window energies for silence decisions.
struct Frames {
    energy: Vec<f64>,
    silence_energy: Vec<f64>,
    ceps: Vec<Vec<f64>>,
}

fn percentile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[((s.len() - 1) as f64 * q) as usize]
}

fn frames(w: &Waveform) -> Result<Frames> {
    let cfg = analysis(w.sample_rate);
    let fb = mel_filterbank(N_MELS, &cfg, 0.0, w.sample_rate as f64 / 2.0)?;
    let win = cfg.window.coefficients(cfg.window_length);
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let x = &w.samples;
    let n = if x.len() < cfg.window_length { 0 } else { (x.len() - cfg.window_length) / cfg.hop_length + 1 };
    let long = (SILENCE_SECONDS * w.sample_rate as f64).round() as usize;
    let mut energy = Vec::with_capacity(n);
    let mut silence_energy = Vec::with_capacity(n);
    let mut spectra = Vec::with_capacity(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for t in 0..n {
        let start = t * cfg.hop_length;
        let seg = &x[start..start + cfg.window_length];
        energy.push(seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64);
        let centre = start + cfg.window_length / 2;
        let (lo, hi) = (centre.saturating_sub(long / 2), (centre + long / 2).min(x.len()));
        silence_energy.push(x[lo..hi].iter().map(|v| v * v).sum::<f64>() / (hi - lo).max(1) as f64);
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (b, (&s, &wv)) in buf.iter_mut().zip(seg.iter().zip(&win)) {
            b.re = s * wv;
        }
        fft.process(&mut buf);
        spectra.push(buf[..cfg.bins()].iter().map(|c| c.norm_sqr()).collect::<Vec<f64>>());
    }
    // Spectral subtraction of the noise estimated from the quietest frames.
    let quiet = percentile(&energy, 0.1);
    let mut noise = vec![0.0; cfg.bins()];
    let quiet_frames: Vec<&Vec<f64>> = spectra.iter().zip(&energy).filter(|(_, &e)| e <= quiet).map(|(s, _)| s).collect();
    for s in &quiet_frames {
        noise.iter_mut().zip(s.iter()).for_each(|(a, b)| *a += b / quiet_frames.len() as f64);
    }
    let mut logmel = vec![0.0; N_MELS];
    let ceps = spectra
        .iter()
        .map(|p| {
            let clean: Vec<f64> = p.iter().zip(&noise).map(|(&p, &n)| (p - n).max(0.01 * p)).collect();
            let mel: Vec<f64> = (0..N_MELS).map(|m| fb.row(m).iter().zip(&clean).map(|(a, b)| a * b).sum()).collect();
            // Limit the dynamic range so that noise filling deep spectral
            // valleys barely changes the shape.
            let top = mel.iter().copied().fold(0.0, f64::max);
            for (l, e) in logmel.iter_mut().zip(&mel) {
                *l = (e + DYNAMIC_RANGE * top).max(1e-20).ln();
            }
            dct(&logmel)
        })
        .collect();
    Ok(Frames { energy, silence_energy, ceps })
}

/// Orthonormal DCT-II coefficients 1..=N_CEPS (c0, the level, is dropped).
fn dct(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    (1..=N_CEPS)
        .map(|k| {
            let s: f64 = x.iter().enumerate().map(|(i, v)| v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos()).sum();
            s * (2.0 / n).sqrt()
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Templates {
    pub sample_rate: u32,
    /// `symbols[s]` is the mean cepstrum of symbol `s` in the canonical voice.
    pub symbols: Vec<Vec<f64>>,
}

impl Templates {
    pub fn build(m: &CorpusManifest) -> Result<Self> {
        Self::for_vocab(m.vocab_size, m.sample_rate)
    }

    pub fn for_vocab(vocab: usize, sample_rate: u32) -> Result<Self> {
        let canon = SpeakerSpec::canonical();
        let symbols = (0..vocab)
            .map(|s| {
                let mut acc = vec![0.0; N_CEPS];
                let mut count = 0usize;
                for seed in 0..TEMPLATE_RENDERS {
                    let seq = SymbolSequence::new(vec![vec![s]])?;
                    let w = render_utterance(&seq, &canon, vocab, sample_rate, seed)?;
                    let f = frames(&w)?;
                    let peak = f.energy.iter().copied().fold(0.0, f64::max);
                    for (e, c) in f.energy.iter().zip(&f.ceps) {
                        if *e >= 0.3 * peak {
                            acc.iter_mut().zip(c).for_each(|(a, v)| *a += v);
                            count += 1;
                        }
                    }
                }
                Ok(acc.into_iter().map(|a| a / count.max(1) as f64).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Templates { sample_rate, symbols })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)? + "\n").map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(serde_json::from_str(&std::fs::read_to_string(path).map_err(io_err(path))?)?)
    }

    /// Templates stored next to a corpus manifest, rebuilt if absent.
    pub fn for_corpus(dir: &Path, m: &CorpusManifest) -> Result<Self> {
        let p = dir.join(TEMPLATE_FILE);
        if p.exists() {
            Self::load(p)
        } else {
            Self::build(m)
        }
    }

    fn classify(&self, c: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (s, t) in self.symbols.iter().enumerate() {
            let v = cosine(c, t);
            if v > best.1 {
                best = (s, v);
            }
        }
        best.0
    }
}

/// Splits `[lo, hi)` at deep energy valleys; each piece is one symbol.
fn split_at_valleys(e: &[f64], lo: usize, hi: usize, out: &mut Vec<(usize, usize)>) {
    let mut start = lo;
    for t in lo + 1..hi.saturating_sub(1) {
        if e[t] <= e[t - 1] && e[t] <= e[t + 1] {
            let left = e[start..t].iter().copied().fold(0.0, f64::max);
            let right = e[t + 1..hi].iter().copied().fold(0.0, f64::max);
            if e[t] < VALLEY_DEPTH * left.min(right) {
                out.push((start, t));
                start = t + 1;
            }
        }
    }
    out.push((start, hi));
}

pub fn recognize(w: &Waveform, t: &Templates) -> Result<SymbolSequence> {
    if w.sample_rate != t.sample_rate {
        return Err(Error::Invalid(format!("recognizer templates are for {} Hz, audio is {} Hz", t.sample_rate, w.sample_rate)));
    }
    let f = frames(w)?;
    let n = f.energy.len();
    let peak = f.energy.iter().copied().fold(0.0, f64::max);
    if peak <= 1e-12 {
        return Ok(SymbolSequence::default());
    }
    // The quietest window estimates the noise floor; it is only trusted while
    // it is well below speech level.
    let silence_peak = f.silence_energy.iter().copied().fold(0.0, f64::max);
    let silent = (silence_peak * 1e-4).max((2.5 * percentile(&f.silence_energy, 0.0)).min(0.01 * silence_peak));
    let weak = (peak * 1e-3).max((3.0 * percentile(&f.energy, 0.0)).min(0.02 * peak));

    // Words are maximal runs without a silent frame; inside a word, audible
    // stretches are split into symbols at energy valleys.
    let mut words: Vec<Vec<usize>> = Vec::new();
    let mut t0 = 0;
    while t0 < n {
        if f.silence_energy[t0] < silent {
            t0 += 1;
            continue;
        }
        let mut t1 = t0;
        while t1 < n && f.silence_energy[t1] >= silent {
            t1 += 1;
        }
        let mut segments = Vec::new();
        let mut a = t0;
        while a < t1 {
            if f.energy[a] < weak {
                a += 1;
                continue;
            }
            let mut b = a;
            while b < t1 && f.energy[b] >= weak {
                b += 1;
            }
            split_at_valleys(&f.energy, a, b, &mut segments);
            a = b;
        }
        let mut word: Vec<usize> = Vec::new();
        for (a, b) in segments {
            if b - a < MIN_RUN {
                continue;
            }
            let top = f.energy[a..b].iter().copied().fold(0.0, f64::max);
            let mut mean = vec![0.0; N_CEPS];
            for k in a..b {
                if f.energy[k] >= 0.3 * top {
                    mean.iter_mut().zip(&f.ceps[k]).for_each(|(m, c)| *m += f.energy[k] * c);
                }
            }
            let s = t.classify(&mean);
            if word.last() != Some(&s) {
                word.push(s);
            }
        }
        if !word.is_empty() {
            words.push(word);
        }
        t0 = t1;
    }
    Ok(SymbolSequence { words })
}

/// Spectrogram view used for debugging recognizer decisions.
pub fn cepstrogram(w: &Waveform) -> Result<Matrix> {
    let f = frames(w)?;
    Matrix::new(f.ceps.len(), N_CEPS, f.ceps.concat())
}
