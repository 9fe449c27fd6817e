//! Frozen oracle speaker embeddings and pitch estimation.

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 256;
pub const CANONICAL_F0: f64 = 220.0;
const EMBED_SEED: u64 = 0x5EED_5EA4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerSpec {
    pub speaker_id: u32,
    /// Fundamental of the harmonic source, Hz.
    pub f0: f64,
    /// Spectral slope in dB per octave.
    pub tilt: f64,
}

impl SpeakerSpec {
    pub fn canonical() -> Self {
        SpeakerSpec { speaker_id: 0, f0: CANONICAL_F0, tilt: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(80.0..=400.0).contains(&self.f0) {
            return Err(Error::Invalid(format!("speaker {} f0 {} Hz outside [80, 400]", self.speaker_id, self.f0)));
        }
        if !self.tilt.is_finite() {
            return Err(Error::Invalid(format!("speaker {} has non-finite tilt", self.speaker_id)));
        }
        Ok(())
    }
}

/// Four voices whose pairwise f0 ratios are at least 1.25 and never an octave.
pub fn default_registry() -> Vec<SpeakerSpec> {
    vec![
        SpeakerSpec::canonical(),
        SpeakerSpec { speaker_id: 1, f0: 130.0, tilt: -2.0 },
        SpeakerSpec { speaker_id: 2, f0: 175.0, tilt: -1.0 },
        SpeakerSpec { speaker_id: 3, f0: 300.0, tilt: 1.0 },
    ]
}

/// 256-dimensional unit vector; a pure function of the speaker id.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(pub Vec<f64>);

impl SpeakerEmbedding {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum::<f64>() / (self.norm() * other.norm())
    }

    pub fn check_unit(&self, tol: f64) -> Result<()> {
        let n = self.norm();
        if (n - 1.0).abs() > tol {
            return Err(Error::Invalid(format!("speaker embedding norm {n} is not 1")));
        }
        Ok(())
    }
}

pub fn speaker_embed(spec: &SpeakerSpec) -> Result<SpeakerEmbedding> {
    spec.validate()?;
    Ok(embed_id(spec.speaker_id))
}

fn embed_id(id: u32) -> SpeakerEmbedding {
    let mut r = s2st_tensor::rng::stream(EMBED_SEED, "speaker.embedding", id as u64, 0);
    let v: Vec<f64> = (0..EMBED_DIM).map(|_| StandardNormal.sample(&mut r)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    SpeakerEmbedding(v.into_iter().map(|x| x / n).collect())
}

/// Estimates f0 and returns the embedding of the registered speaker with the
/// nearest pitch (in log frequency).
pub fn embed_from_utterance(w: &Waveform, registry: &[SpeakerSpec]) -> Result<SpeakerEmbedding> {
    let spec = identify_speaker(w, registry)?;
    speaker_embed(&spec)
}

pub fn identify_speaker(w: &Waveform, registry: &[SpeakerSpec]) -> Result<SpeakerSpec> {
    let f0 = estimate_f0(w)?;
    registry
        .iter()
        .min_by(|a, b| (a.f0.ln() - f0.ln()).abs().total_cmp(&(b.f0.ln() - f0.ln()).abs()))
        .copied()
        .ok_or_else(|| Error::Invalid("empty speaker registry".into()))
}

const F0_MIN: f64 = 80.0;
const F0_MAX: f64 = 400.0;
/// Autocorrelation lag resolution, in samples, is 1 / ACF_UPSAMPLE.
const ACF_UPSAMPLE: usize = 8;

/// Median autocorrelation pitch over voiced 40 ms frames (10 ms hop).
pub fn estimate_f0(w: &Waveform) -> Result<f64> {
    let sr = w.sample_rate as f64;
    let frame = (0.04 * sr) as usize;
    let hop = (0.01 * sr) as usize;
    let x = &w.samples;
    if x.len() < frame || hop == 0 {
        return Err(Error::NoVoicedContent);
    }
    let energies: Vec<f64> =
        (0..=(x.len() - frame) / hop).map(|i| x[i * hop..i * hop + frame].iter().map(|v| v * v).sum::<f64>() / frame as f64).collect();
    let peak = energies.iter().copied().fold(0.0, f64::max);
    if peak < 1e-8 {
        return Err(Error::NoVoicedContent);
    }
    let lag_lo = (sr / F0_MAX).floor() as usize;
    let lag_hi = ((sr / F0_MIN).ceil() as usize).min(frame - 2);
    // Zero padding to >= 2 * frame makes the circular autocorrelation linear;
    // the wider inverse transform interpolates it band-limited between
    // integer lags. Near-Nyquist harmonics make integer-lag samples of a
    // short-lag peak unreliable.
    let n = (2 * frame).next_power_of_two();
    let fine = n * ACF_UPSAMPLE;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(fine);
    let u = ACF_UPSAMPLE as f64;
    let mut estimates = Vec::new();
    for (i, &e) in energies.iter().enumerate() {
        if e < 0.1 * peak {
            continue;
        }
        let seg = &x[i * hop..i * hop + frame];
        let mean = seg.iter().sum::<f64>() / frame as f64;
        let mut buf: Vec<Complex64> = seg.iter().map(|v| Complex64::new(v - mean, 0.0)).collect();
        buf.resize(n, Complex64::new(0.0, 0.0));
        fwd.process(&mut buf);
        let mut spec = vec![Complex64::new(0.0, 0.0); fine];
        for k in 0..n / 2 {
            let pk = buf[k].norm_sqr();
            spec[k].re = pk;
            if k > 0 {
                spec[fine - k].re = pk;
            }
        }
        let half = 0.5 * buf[n / 2].norm_sqr();
        spec[n / 2].re = half;
        spec[fine - n / 2].re = half;
        inv.process(&mut spec);
        let r0 = spec[0].re;
        if r0 <= 0.0 {
            continue;
        }
        // Normalized by the overlap length so long lags are not penalized.
        let ac = |j: usize| spec[j].re / r0 * frame as f64 / (frame as f64 - j as f64 / u);
        let peaks: Vec<(f64, f64)> = (lag_lo.max(1) * ACF_UPSAMPLE..=lag_hi * ACF_UPSAMPLE)
            .filter_map(|j| {
                let (a, b, c) = (ac(j - 1), ac(j), ac(j + 1));
                if b < a || b < c {
                    return None;
                }
                let denom = a - 2.0 * b + c;
                let offset = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
                Some(((j as f64 + offset) / u, b - 0.25 * (a - c) * offset))
            })
            .collect();
        let Some(&(best_lag, best)) = peaks.iter().max_by(|a, b| a.1.total_cmp(&b.1)) else {
            continue;
        };
        if best < 0.5 {
            continue;
        }
        // A strong peak at an integer fraction of the best lag is the true
        // period (the best one was a multiple of it). Only fractions count:
        // a strong high harmonic adds near-equal ripple peaks, at least two
        // samples apart, beside the period.
        let near = |l: f64| {
            peaks
                .iter()
                .filter(|p| (p.0 - l).abs() <= 1.0)
                .min_by(|a, b| (a.0 - l).abs().total_cmp(&(b.0 - l).abs()))
                .filter(|p| p.1 >= 0.9 * best)
                .map(|p| p.0)
        };
        let lag = (2..).map(|k| best_lag / k as f64).take_while(|&l| l >= lag_lo as f64 - 1.0).filter_map(near).last().unwrap_or(best_lag);
        estimates.push(sr / lag);
    }
    if estimates.is_empty() {
        return Err(Error::NoVoicedContent);
    }
    estimates.sort_by(f64::total_cmp);
    let n = estimates.len();
    Ok(if n % 2 == 1 { estimates[n / 2] } else { 0.5 * (estimates[n / 2 - 1] + estimates[n / 2]) })
}
