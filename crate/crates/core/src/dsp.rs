//! Short-time Fourier analysis, mel features and Griffin-Lim vocoding.
//!
//! All signal processing runs in f64; the model consumes f32 copies.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied before taking logs of magnitudes.
pub const LOG_FLOOR: f64 = 1e-5;

/// Relative floor on the overlap-add denominator in the uncovered edges.
const EDGE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Dsp("sample rate must be positive".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::Dsp("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    #[serde(default)]
    pub window: Window,
}

impl StftConfig {
    /// 8 kHz, 256-point FFT, 25 ms window, 10 ms hop: 129 bins.
    pub fn toy() -> Self {
        StftConfig { sample_rate: 8000, window_length: 200, hop_length: 80, fft_size: 256, window: Window::Hann }
    }

    /// 24 kHz, 2048-point FFT, 50 ms window, 12.5 ms hop: 1025 bins.
    pub fn full_scale() -> Self {
        StftConfig { sample_rate: 24000, window_length: 1200, hop_length: 300, fft_size: 2048, window: Window::Hann }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.hop_length == 0 || self.hop_length > self.window_length || self.window_length > self.fft_size {
            return Err(Error::Dsp(format!(
                "need 0 < hop ({}) <= window ({}) <= fft size ({})",
                self.hop_length, self.window_length, self.fft_size
            )));
        }
        Ok(())
    }

    /// Frames produced for a signal of `len` samples (tail zero-padded).
    pub fn frames_for(&self, len: usize) -> usize {
        if len <= self.window_length {
            1
        } else {
            (len - self.window_length).div_ceil(self.hop_length) + 1
        }
    }

    /// Length of the signal reconstructed from `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        frames * self.hop_length + self.window_length - self.hop_length
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    /// Row-major `frames × bins`.
    pub data: Vec<Complex64>,
    pub cfg: StftConfig,
}

impl ComplexSpectrogram {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn magnitude(&self) -> Matrix {
        Matrix { rows: self.frames, cols: self.bins, data: self.data.iter().map(|c| c.norm()).collect() }
    }

    /// `ln(max(|S|, floor))`.
    pub fn log_magnitude(&self, floor: f64) -> Matrix {
        self.magnitude().map(|m| m.max(floor).ln())
    }
}

/// Dense real `rows × cols` matrix (frames × channels for features).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Log-magnitude spectrogram, frames × bins.
pub type LogSpectrogram = Matrix;
/// Log-mel features, frames × channels.
pub type MelFeatures = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dsp(format!("{rows}x{cols} matrix with {} values", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    }
}

struct Plans {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut p = FftPlanner::new();
    Plans { fwd: p.plan_fft_forward(n), inv: p.plan_fft_inverse(n) }
}

fn stft_with(x: &[f64], cfg: &StftConfig, fwd: &dyn Fft<f64>, win: &[f64]) -> ComplexSpectrogram {
    let frames = cfg.frames_for(x.len());
    let bins = cfg.bins();
    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fwd.get_inplace_scratch_len()];
    for t in 0..frames {
        let start = t * cfg.hop_length;
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (i, &w) in win.iter().enumerate() {
            if let Some(&s) = x.get(start + i) {
                buf[i].re = s * w;
            }
        }
        fwd.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..bins]);
    }
    ComplexSpectrogram { frames, bins, data, cfg: *cfg }
}

/// Short-time Fourier transform; frame `t` covers `[t*hop, t*hop + window)`.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if w.samples.len() < cfg.window_length {
        return Err(Error::Dsp(format!("signal of {} samples is shorter than one window ({})", w.samples.len(), cfg.window_length)));
    }
    let p = plans(cfg.fft_size);
    Ok(stft_with(&w.samples, cfg, p.fwd.as_ref(), &cfg.window.coefficients(cfg.window_length)))
}

/// Overlap-add synthesis normalized by the summed squared window.
fn istft_with(s: &ComplexSpectrogram, inv: &dyn Fft<f64>, win: &[f64]) -> Result<Vec<f64>> {
    let cfg = &s.cfg;
    let n = cfg.fft_size;
    let len = cfg.signal_len(s.frames);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); inv.get_inplace_scratch_len()];
    for t in 0..s.frames {
        let f = s.frame(t);
        buf[..s.bins].copy_from_slice(f);
        // Hermitian completion; DC and Nyquist must be real for a real signal.
        buf[0].im = 0.0;
        if n.is_multiple_of(2) {
            buf[n / 2].im = 0.0;
        }
        for k in s.bins..n {
            buf[k] = buf[n - k].conj();
        }
        inv.process_with_scratch(&mut buf, &mut scratch);
        let start = t * cfg.hop_length;
        for (i, &wv) in win.iter().enumerate() {
            out[start + i] += wv * buf[i].re / n as f64;
            norm[start + i] += wv * wv;
        }
    }
    // Edge samples touched only by the window tails have a vanishing
    // denominator; it is floored there so that inconsistent spectra cannot
    // blow them up. The interior must be properly covered.
    let edge = cfg.window_length - cfg.hop_length;
    let floor = EDGE_FLOOR * norm.iter().copied().fold(0.0, f64::max);
    for (i, (o, &d)) in out.iter_mut().zip(&norm).enumerate() {
        let interior = (edge..len.saturating_sub(edge)).contains(&i);
        if interior && d < 1e-10 {
            return Err(Error::Dsp(format!("overlap-add normalization {d:e} at sample {i}; window/hop pair does not cover the signal")));
        }
        *o = if interior {
            *o / d
        } else if floor > 0.0 {
            *o / d.max(floor)
        } else {
            0.0
        };
    }
    Ok(out)
}

/// Inverse STFT; output length `frames*hop + (window - hop)`.
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    s.cfg.validate()?;
    let p = plans(s.cfg.fft_size);
    let samples = istft_with(s, p.inv.as_ref(), &s.cfg.window.coefficients(s.cfg.window_length))?;
    Waveform::new(samples, s.cfg.sample_rate)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with centers uniformly spaced on the mel scale; `n_mels × bins`.
///
/// A filter too narrow to contain any FFT bin gets unit weight on the bin
/// nearest its center so that every row has a peak.
pub fn mel_filterbank(n_mels: usize, cfg: &StftConfig, fmin: f64, fmax: f64) -> Result<Matrix> {
    cfg.validate()?;
    let nyquist = cfg.sample_rate as f64 / 2.0;
    if n_mels == 0 || !(0.0 <= fmin && fmin < fmax && fmax <= nyquist) {
        return Err(Error::Dsp(format!("invalid mel range: {n_mels} filters over [{fmin}, {fmax}] Hz with Nyquist {nyquist}")));
    }
    let bins = cfg.bins();
    let (m_lo, m_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64)).collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut fb = Matrix::zeros(n_mels, bins);
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = fb.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
        }
        if row.iter().all(|&w| w == 0.0) {
            row[((c / bin_hz).round() as usize).min(bins - 1)] = 1.0;
        }
    }
    Ok(fb)
}

/// `ln(max(fb · |S|, floor))` per frame.
pub fn log_mel(s: &ComplexSpectrogram, fb: &Matrix, floor: f64) -> Result<MelFeatures> {
    if fb.cols != s.bins {
        return Err(Error::Dsp(format!("filterbank has {} bins, spectrogram {}", fb.cols, s.bins)));
    }
    let mut out = Matrix::zeros(s.frames, fb.rows);
    let mut mag = vec![0.0; s.bins];
    for t in 0..s.frames {
        for (m, c) in mag.iter_mut().zip(s.frame(t)) {
            *m = c.norm();
        }
        for (ch, o) in out.row_mut(t).iter_mut().enumerate() {
            let e: f64 = fb.row(ch).iter().zip(&mag).map(|(w, m)| w * m).sum();
            *o = e.max(floor).ln();
        }
    }
    Ok(out)
}

/// Groups frames in non-overlapping blocks of `k`, zero-padding the tail.
pub fn stack_frames(m: &MelFeatures, k: usize) -> Result<MelFeatures> {
    if k == 0 {
        return Err(Error::Dsp("stack factor must be at least 1".into()));
    }
    let rows = m.rows.div_ceil(k);
    let mut data = m.data.clone();
    data.resize(rows * k * m.cols, 0.0);
    Matrix::new(rows, k * m.cols, data)
}

fn regression(m: &Matrix, window: usize) -> Matrix {
    let denom = 2.0 * (1..=window).map(|k| (k * k) as f64).sum::<f64>();
    let last = m.rows as isize - 1;
    let at = |t: isize| t.clamp(0, last) as usize;
    let mut out = Matrix::zeros(m.rows, m.cols);
    for t in 0..m.rows as isize {
        for k in 1..=window {
            let (a, b) = (m.row(at(t + k as isize)), m.row(at(t - k as isize)));
            let o = out.row_mut(t as usize);
            for c in 0..m.cols {
                o[c] += k as f64 * (a[c] - b[c]);
            }
        }
        out.row_mut(t as usize).iter_mut().for_each(|x| *x /= denom);
    }
    out
}

/// Appends regression deltas and accelerations (delta of delta): `[x, Δx, Δ²x]`.
pub fn add_deltas(m: &MelFeatures, window: usize) -> Result<MelFeatures> {
    if window == 0 || m.rows < 2 * window + 1 {
        return Err(Error::Dsp(format!("{} frames is too short for delta window {window}", m.rows)));
    }
    let d = regression(m, window);
    let a = regression(&d, window);
    let mut out = Matrix::zeros(m.rows, 3 * m.cols);
    for t in 0..m.rows {
        let o = out.row_mut(t);
        o[..m.cols].copy_from_slice(m.row(t));
        o[m.cols..2 * m.cols].copy_from_slice(d.row(t));
        o[2 * m.cols..].copy_from_slice(a.row(t));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GriffinLimOutput {
    pub waveform: Waveform,
    /// `‖|stft(x_i)| - M‖ / ‖M‖` for the initial estimate and after every iteration.
    pub consistency: Vec<f64>,
}

/// Momentum of the accelerated Griffin-Lim iteration.
pub const GRIFFIN_LIM_MOMENTUM: f64 = 0.99;

/// Griffin-Lim phase reconstruction from a linear magnitude spectrogram,
/// accelerated with [`GRIFFIN_LIM_MOMENTUM`]; see [`griffin_lim_with`].
pub fn griffin_lim(mag: &Matrix, cfg: &StftConfig, iters: usize, seed: Option<u64>) -> Result<GriffinLimOutput> {
    griffin_lim_with(mag, cfg, iters, seed, GRIFFIN_LIM_MOMENTUM)
}

fn consistency_error(est: &ComplexSpectrogram, mag: &Matrix, m_norm: f64) -> f64 {
    let err = est.data.iter().zip(&mag.data).map(|(c, &m)| (c.norm() - m).powi(2)).sum::<f64>().sqrt();
    if m_norm > 0.0 {
        err / m_norm
    } else {
        0.0
    }
}

/// Phases of `phase` with magnitudes `mag`; zero-magnitude cells get phase 0.
fn impose_magnitude(phase: &ComplexSpectrogram, mag: &Matrix) -> ComplexSpectrogram {
    let mut s = phase.clone();
    for (z, &m) in s.data.iter_mut().zip(&mag.data) {
        let n = z.norm();
        *z = if n > 0.0 { *z * (m / n) } else { Complex64::new(m, 0.0) };
    }
    s
}

/// Griffin-Lim with momentum: each step extrapolates the consistent estimate
/// by `momentum` times its last change before imposing the magnitudes. A step
/// that would raise the consistency error is replaced by a plain Griffin-Lim
/// step (which cannot) and the momentum restarts, so the trace is
/// non-increasing. `momentum = 0` is the plain algorithm.
///
/// Phase starts at zero; `seed = Some(s)` switches to a uniformly random
/// initial phase drawn from a stream keyed by `s`.
pub fn griffin_lim_with(mag: &Matrix, cfg: &StftConfig, iters: usize, seed: Option<u64>, momentum: f64) -> Result<GriffinLimOutput> {
    cfg.validate()?;
    if mag.cols != cfg.bins() {
        return Err(Error::Dsp(format!("magnitude has {} bins, config {}", mag.cols, cfg.bins())));
    }
    if mag.data.iter().any(|&m| m < 0.0 || !m.is_finite()) {
        return Err(Error::Dsp("magnitudes must be finite and non-negative".into()));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Dsp(format!("momentum {momentum} outside [0, 1)")));
    }
    let p = plans(cfg.fft_size);
    let win = cfg.window.coefficients(cfg.window_length);
    let m_norm = mag.data.iter().map(|m| m * m).sum::<f64>().sqrt();
    let mut spec = ComplexSpectrogram {
        frames: mag.rows,
        bins: mag.cols,
        data: mag.data.iter().map(|&m| Complex64::new(m, 0.0)).collect(),
        cfg: *cfg,
    };
    if let Some(s) = seed {
        use rand::Rng;
        let mut r = s2st_tensor::rng::stream(s, "griffin-lim.phase", 0, 0);
        for c in spec.data.iter_mut() {
            *c = Complex64::from_polar(c.re, r.random_range(-PI..PI));
        }
    }
    let project = |s: &ComplexSpectrogram| -> Result<(Vec<f64>, ComplexSpectrogram)> {
        let x = istft_with(s, p.inv.as_ref(), &win)?;
        let est = stft_with(&x, cfg, p.fwd.as_ref(), &win);
        Ok((x, est))
    };
    let (mut x, mut est) = project(&spec)?;
    let mut err = consistency_error(&est, mag, m_norm);
    let mut prev = est.clone();
    let mut consistency = Vec::with_capacity(iters + 1);
    consistency.push(err);
    for _ in 0..iters {
        let mut t = est.clone();
        for ((z, &c), &q) in t.data.iter_mut().zip(&est.data).zip(&prev.data) {
            *z = c + (c - q) * momentum;
        }
        let (cx, cest) = project(&impose_magnitude(&t, mag))?;
        let cerr = consistency_error(&cest, mag, m_norm);
        if cerr <= err {
            prev = std::mem::replace(&mut est, cest);
            (x, err) = (cx, cerr);
        } else {
            let (px, pest) = project(&impose_magnitude(&est, mag))?;
            err = consistency_error(&pest, mag, m_norm);
            prev = pest.clone();
            (x, est) = (px, pest);
        }
        consistency.push(err);
    }
    Ok(GriffinLimOutput { waveform: Waveform::new(x, cfg.sample_rate)?, consistency })
}

/// Feature extraction recipe for model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureRecipe {
    /// Non-overlapping stacks of 3 frames.
    Stack3,
    /// Deltas and accelerations appended.
    DeltasAccel,
}

impl FeatureRecipe {
    pub fn channels(self, n_mels: usize) -> usize {
        3 * n_mels
    }
}

/// Precomputed analysis state for one feature configuration.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub stft: StftConfig,
    pub n_mels: usize,
    pub recipe: FeatureRecipe,
    fb: Matrix,
}

impl FeatureExtractor {
    pub fn new(stft: StftConfig, n_mels: usize, recipe: FeatureRecipe) -> Result<Self> {
        let fb = mel_filterbank(n_mels, &stft, 0.0, stft.sample_rate as f64 / 2.0)?;
        Ok(FeatureExtractor { stft, n_mels, recipe, fb })
    }

    pub fn filterbank(&self) -> &Matrix {
        &self.fb
    }

    /// Pads `w` to one window if it is shorter.
    fn padded_stft(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        if w.samples.len() >= self.stft.window_length {
            return stft(w, &self.stft);
        }
        let mut s = w.samples.clone();
        s.resize(self.stft.window_length, 0.0);
        stft(&Waveform::new(s, w.sample_rate)?, &self.stft)
    }

    /// Model input features.
    pub fn features(&self, w: &Waveform) -> Result<MelFeatures> {
        let mel = log_mel(&self.padded_stft(w)?, &self.fb, LOG_FLOOR)?;
        match self.recipe {
            FeatureRecipe::Stack3 => stack_frames(&mel, 3),
            FeatureRecipe::DeltasAccel => {
                let mut mel = mel;
                while mel.rows < 5 {
                    let last = mel.row(mel.rows - 1).to_vec();
                    mel.data.extend(last);
                    mel.rows += 1;
                }
                add_deltas(&mel, 2)
            }
        }
    }

    /// Model target: log-magnitude linear spectrogram.
    pub fn log_spectrogram(&self, w: &Waveform) -> Result<LogSpectrogram> {
        Ok(self.padded_stft(w)?.log_magnitude(LOG_FLOOR))
    }
}
