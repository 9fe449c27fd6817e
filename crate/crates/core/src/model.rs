//! The direct speech-to-speech model: BLSTM encoder with selectable taps,
//! optional speaker conditioning, attention-based spectrogram decoder with a
//! reduction factor and stop token, auxiliary phoneme decoders, and the
//! composite training loss.

use s2st_tensor::{Graph, ParamStore, Real, Tensor, Var};

use crate::config::{AuxMode, ModelConfig};
use crate::dsp::{griffin_lim, FeatureExtractor, LogSpectrogram, Matrix, MelFeatures, Waveform};
use crate::error::{Error, Result};
use crate::nn::{self, Init, LstmParams, Pass};
use crate::speaker::{SpeakerEmbedding, EMBED_DIM};

/// Linear-magnitude floor of log spectrograms.
pub const SPEC_FLOOR: f64 = 1e-5;
/// Initial bias of the frame projection, roughly the mean log magnitude.
const FRAME_BIAS_INIT: f64 = -5.0;
/// Initial stop bias: stopping is rare during teacher forcing.
const STOP_BIAS_INIT: f64 = -3.0;

pub const SOURCE_AUX: &str = "aux.src";
pub const TARGET_AUX: &str = "aux.tgt";
/// Phoneme decoder used by encoder pre-training.
pub const PRETRAIN_AUX: &str = "st";

pub fn log_floor() -> f64 {
    SPEC_FLOOR.ln()
}

// ------------------------------------------------------------------ parameters

fn encoder_prefix(layer: usize) -> String {
    format!("encoder.layer{layer}")
}

/// Prefix of the parameters of the `layer`-th (0-based) encoder layer.
pub fn encoder_layer_prefix(layer: usize) -> String {
    encoder_prefix(layer) + "."
}

fn init_phoneme_decoder<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig, prefix: &str) -> Result<()> {
    let d = cfg.encoder_width();
    init.matrix(&format!("{prefix}.embed"), cfg.symbol_vocab + 2, cfg.aux_embedding)?;
    init.attention(&format!("{prefix}.attention"), cfg.aux_units, d, cfg.aux_attention_units)?;
    for l in 0..cfg.aux_layers {
        let input = if l == 0 { cfg.aux_embedding + d } else { cfg.aux_units };
        init.lstm(&format!("{prefix}.lstm{l}"), input, cfg.aux_units)?;
    }
    init.linear(&format!("{prefix}.out"), cfg.aux_units + d, cfg.aux_classes())
}

fn init_encoder<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<()> {
    let mut input = cfg.input_channels();
    for l in 0..cfg.encoder_layers {
        init.lstm(&format!("{}.fwd", encoder_prefix(l)), input, cfg.encoder_units)?;
        init.lstm(&format!("{}.bwd", encoder_prefix(l)), input, cfg.encoder_units)?;
        input = cfg.encoder_width();
    }
    Ok(())
}

/// Fresh parameters for the full model; auxiliary decoders are created only
/// for the tasks `aux` enables.
pub fn init_params<T: Real>(cfg: &ModelConfig, aux: AuxMode, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init { store: &mut store, seed };
    init_encoder(&mut init, cfg)?;
    if cfg.speaker_conditioning {
        init.matrix("speaker.proj", EMBED_DIM, cfg.speaker_projection)?;
    }
    let d = cfg.memory_width();
    let bins = cfg.bins();
    init.prenet("decoder.prenet", bins, cfg.prenet_units)?;
    init.multihead_attention("decoder.attention", cfg.prenet_units + cfg.decoder_units, d)?;
    for l in 0..cfg.decoder_layers {
        let input = if l == 0 { cfg.prenet_units + d } else { cfg.decoder_units };
        init.lstm(&format!("decoder.lstm{l}"), input, cfg.decoder_units)?;
    }
    init.matrix("decoder.frame.W", cfg.decoder_units + d, cfg.reduction * bins)?;
    init.constant("decoder.frame.b", &[cfg.reduction * bins], FRAME_BIAS_INIT)?;
    init.matrix("decoder.stop.W", cfg.decoder_units + d, 1)?;
    init.constant("decoder.stop.b", &[1], STOP_BIAS_INIT)?;
    init.postnet("postnet", bins, cfg.postnet_channels, cfg.postnet_layers, cfg.postnet_kernel)?;
    if aux.source() {
        init_phoneme_decoder(&mut init, cfg, SOURCE_AUX)?;
    }
    if aux.target() {
        init_phoneme_decoder(&mut init, cfg, TARGET_AUX)?;
    }
    Ok(store)
}

/// Encoder plus the speech-to-text decoder used for encoder pre-training.
pub fn init_pretrain_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init { store: &mut store, seed };
    init_encoder(&mut init, cfg)?;
    init_phoneme_decoder(&mut init, cfg, PRETRAIN_AUX)?;
    Ok(store)
}

// ------------------------------------------------------------------ batches

/// One training/evaluation example in feature space.
#[derive(Debug, Clone)]
pub struct Example {
    /// Encoder input `[T_in, channels]`.
    pub features: MelFeatures,
    /// Target log spectrogram `[T_out, bins]`.
    pub target: Option<LogSpectrogram>,
    pub source_symbols: Vec<usize>,
    pub target_symbols: Vec<usize>,
    pub speaker: Option<SpeakerEmbedding>,
}

/// Teacher-forcing tensors for the spectrogram decoder.
#[derive(Debug, Clone)]
pub struct TargetBatch<T: Real> {
    /// Decoder steps per item.
    pub steps: Vec<usize>,
    pub max_steps: usize,
    /// Batch-major `[B * S * r, bins]`.
    pub frames: Tensor<T>,
    /// Previous-frame decoder inputs, time-major `[S * B, bins]`.
    pub prev: Tensor<T>,
    /// Per-frame weights (batch-major), 0 on batch padding.
    pub frame_weights: Vec<T>,
    /// Per-step weights and stop targets (time-major).
    pub step_weights: Vec<T>,
    pub stop_targets: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Batch<T: Real> {
    pub size: usize,
    pub src_lengths: Vec<usize>,
    pub src_seq: usize,
    /// Time-major `[T * B, channels]`.
    pub features: Tensor<T>,
    /// `[B, 256]` when every example carries an embedding.
    pub speakers: Option<Tensor<T>>,
    pub targets: Option<TargetBatch<T>>,
    pub source_symbols: Vec<Vec<usize>>,
    pub target_symbols: Vec<Vec<usize>>,
}

/// Pads a log spectrogram with floor frames to a multiple of `r` frames.
pub fn pad_to_reduction(spec: &LogSpectrogram, r: usize) -> LogSpectrogram {
    let rows = spec.rows.div_ceil(r) * r;
    let mut data = spec.data.clone();
    data.resize(rows * spec.cols, log_floor());
    Matrix { rows, cols: spec.cols, data }
}

impl<T: Real> Batch<T> {
    pub fn new(examples: &[Example], cfg: &ModelConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let b = examples.len();
        let ch = cfg.input_channels();
        let mut src_lengths = Vec::with_capacity(b);
        for e in examples {
            if e.features.rows == 0 {
                return Err(Error::Invalid("example with no input frames".into()));
            }
            if e.features.cols != ch {
                return Err(Error::Invalid(format!("features have {} channels, config expects {ch}", e.features.cols)));
            }
            src_lengths.push(e.features.rows);
        }
        let src_seq = *src_lengths.iter().max().expect("non-empty");
        let mut feat = vec![T::zero(); src_seq * b * ch];
        for (j, e) in examples.iter().enumerate() {
            for t in 0..e.features.rows {
                let dst = &mut feat[(t * b + j) * ch..(t * b + j + 1) * ch];
                for (d, &s) in dst.iter_mut().zip(e.features.row(t)) {
                    *d = T::lit(s);
                }
            }
        }
        let speakers = if examples.iter().all(|e| e.speaker.is_some()) {
            let data = examples.iter().flat_map(|e| e.speaker.as_ref().unwrap().0.iter().map(|&x| T::lit(x))).collect();
            Some(Tensor::new(vec![b, EMBED_DIM], data)?)
        } else {
            None
        };
        let targets = if examples.iter().all(|e| e.target.is_some()) { Some(target_batch(examples, cfg)?) } else { None };
        Ok(Batch {
            size: b,
            src_lengths,
            src_seq,
            features: Tensor::new(vec![src_seq * b, ch], feat)?,
            speakers,
            targets,
            source_symbols: examples.iter().map(|e| e.source_symbols.clone()).collect(),
            target_symbols: examples.iter().map(|e| e.target_symbols.clone()).collect(),
        })
    }
}

fn target_batch<T: Real>(examples: &[Example], cfg: &ModelConfig) -> Result<TargetBatch<T>> {
    let r = cfg.reduction;
    let bins = cfg.bins();
    let b = examples.len();
    let specs: Vec<LogSpectrogram> = examples.iter().map(|e| pad_to_reduction(e.target.as_ref().expect("checked"), r)).collect();
    for s in &specs {
        if s.cols != bins || s.rows == 0 {
            return Err(Error::Invalid(format!("target spectrogram {}x{} for {bins} bins", s.rows, s.cols)));
        }
    }
    let steps: Vec<usize> = specs.iter().map(|s| s.rows / r).collect();
    let max_steps = *steps.iter().max().expect("non-empty");
    let tout = max_steps * r;
    let floor = T::lit(log_floor());
    let mut frames = vec![floor; b * tout * bins];
    let mut frame_weights = vec![T::zero(); b * tout];
    let mut prev = vec![T::zero(); max_steps * b * bins];
    let mut step_weights = vec![T::zero(); max_steps * b];
    let mut stop_targets = vec![T::zero(); max_steps * b];
    for (j, s) in specs.iter().enumerate() {
        for t in 0..s.rows {
            let dst = &mut frames[(j * tout + t) * bins..(j * tout + t + 1) * bins];
            for (d, &v) in dst.iter_mut().zip(s.row(t)) {
                *d = T::lit(v);
            }
            frame_weights[j * tout + t] = T::one();
        }
        for st in 0..steps[j] {
            step_weights[st * b + j] = T::one();
            if st > 0 {
                let src = s.row(st * r - 1);
                let dst = &mut prev[(st * b + j) * bins..(st * b + j + 1) * bins];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = T::lit(v);
                }
            }
        }
        stop_targets[(steps[j] - 1) * b + j] = T::one();
    }
    Ok(TargetBatch {
        steps,
        max_steps,
        frames: Tensor::new(vec![b * tout, bins], frames)?,
        prev: Tensor::new(vec![max_steps * b, bins], prev)?,
        frame_weights,
        step_weights,
        stop_targets,
    })
}

// ------------------------------------------------------------------ encoder

/// Every encoder layer's output, time-major `[T * B, 2h]`.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub layers: Vec<Var>,
    pub lengths: Vec<usize>,
    pub seq: usize,
}

impl Encoded {
    /// Batch-major copy of 1-based layer `tap`.
    pub fn tap<T: Real>(&self, g: &mut Graph<T>, tap: usize) -> Result<Var> {
        let x =
            *self.layers.get(tap.wrapping_sub(1)).ok_or_else(|| Error::Invalid(format!("tap {tap} outside 1..={}", self.layers.len())))?;
        Ok(g.gather_rows(x, &nn::to_batch_major(self.lengths.len(), self.seq))?)
    }
}

pub fn encode<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    features: Var,
    lengths: &[usize],
    pass: &Pass,
) -> Result<Encoded> {
    let batch = lengths.len();
    let rows = g.shape(features)[0];
    if batch == 0 || rows == 0 {
        return Err(Error::Invalid("encode: empty input".into()));
    }
    let mut x = features;
    let mut layers = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        let fwd = LstmParams::load(g, p, &format!("{}.fwd", encoder_prefix(l)))?;
        let bwd = LstmParams::load(g, p, &format!("{}.bwd", encoder_prefix(l)))?;
        x = nn::blstm_layer(g, x, lengths, &fwd, &bwd, 0.0, pass)?;
        layers.push(x);
    }
    Ok(Encoded { layers, lengths: lengths.to_vec(), seq: rows / batch })
}

/// Appends the projected speaker embedding (`emb` `[B, 256]`) to every frame of
/// the batch-major memory `[B*T, d]`.
pub fn condition_speaker<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, memory: Var, emb: &Tensor<T>, seq: usize) -> Result<Var> {
    let batch = emb.shape()[0];
    if emb.shape() != [batch, EMBED_DIM] || g.shape(memory)[0] != batch * seq {
        return Err(Error::Invalid(format!("speaker embeddings {:?} do not match memory {:?}", emb.shape(), g.shape(memory))));
    }
    for b in 0..batch {
        let n = emb.row(b).iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::Invalid(format!("speaker embedding norm {n} is not 1")));
        }
    }
    let w = g.param_from(p, "speaker.proj")?;
    let e = g.constant(emb.clone());
    let proj = g.matmul(e, w)?;
    let idx: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, seq)).collect();
    let tiled = g.gather_rows(proj, &idx)?;
    Ok(g.concat(&[memory, tiled], 1)?)
}

/// Decoder memory: batch-major encoder top, speaker-conditioned when enabled.
pub fn memory<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, cfg: &ModelConfig, enc: &Encoded, speakers: Option<&Tensor<T>>) -> Result<Var> {
    let top = enc.tap(g, enc.layers.len())?;
    if !cfg.speaker_conditioning {
        return Ok(top);
    }
    let emb = speakers.ok_or_else(|| Error::Invalid("speaker conditioning needs an embedding".into()))?;
    condition_speaker(g, p, top, emb, enc.seq)
}

// ------------------------------------------------------------------ spectrogram decoder

struct DecoderCell {
    att: nn::AttentionMemory,
    lstms: Vec<LstmParams>,
    h: Vec<Var>,
    c: Vec<Var>,
}

impl DecoderCell {
    fn new<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, cfg: &ModelConfig, memory: Var, lengths: &[usize]) -> Result<Self> {
        let att = nn::multihead_memory(g, p, "decoder.attention", memory, lengths, cfg.attention_heads)?;
        let lstms = (0..cfg.decoder_layers).map(|l| LstmParams::load(g, p, &format!("decoder.lstm{l}"))).collect::<Result<Vec<_>>>()?;
        let b = lengths.len();
        let h = (0..cfg.decoder_layers).map(|_| g.constant(Tensor::zeros(&[b, cfg.decoder_units]))).collect();
        let c = (0..cfg.decoder_layers).map(|_| g.constant(Tensor::zeros(&[b, cfg.decoder_units]))).collect();
        Ok(DecoderCell { att, lstms, h, c })
    }

    /// One step from the pre-net output `[B, prenet]`; returns the projection
    /// input `[B, h + d]` and the attention weights.
    fn step<T: Real>(&mut self, g: &mut Graph<T>, p: &ParamStore<T>, cfg: &ModelConfig, pre: Var, pass: &Pass) -> Result<(Var, Var)> {
        let top = *self.h.last().expect("at least one decoder layer");
        let query = g.concat(&[pre, top], 1)?;
        let att = nn::attend(g, p, &self.att, query, cfg.attention_dropout, pass)?;
        let mut x = g.concat(&[pre, att.context], 1)?;
        for (l, lstm) in self.lstms.iter().enumerate() {
            let (h, c) = nn::lstm_step(g, lstm, x, self.h[l], self.c[l], cfg.zoneout, pass)?;
            self.h[l] = h;
            self.c[l] = c;
            x = h;
        }
        Ok((g.concat(&[x, att.context], 1)?, att.weights))
    }
}

/// Graph handles of a decoded batch.
#[derive(Debug, Clone)]
pub struct DecodeVars {
    /// Batch-major `[B * T_out, bins]` before and after the post-net.
    pub pre: Var,
    pub post: Var,
    /// Time-major `[S * B, 1]`.
    pub stop: Var,
    /// Per step `[B * H, T_in]`.
    pub attention: Vec<Var>,
    pub steps: usize,
}

/// Teacher-forced decoding of a whole batch.
pub fn decode_teacher_forced<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    memory: Var,
    lengths: &[usize],
    targets: &TargetBatch<T>,
    pass: &Pass,
) -> Result<DecodeVars> {
    let b = lengths.len();
    let bins = cfg.bins();
    let r = cfg.reduction;
    let s = targets.max_steps;
    if targets.frames.shape() != [b * s * r, bins] || targets.prev.shape() != [s * b, bins] {
        return Err(Error::Invalid(format!("target frames {:?} are not a multiple of r = {r} for batch {b}", targets.frames.shape())));
    }
    let prev = g.constant(targets.prev.clone());
    let pre_all = nn::prenet(g, p, "decoder.prenet", prev, cfg.prenet_dropout, cfg.prenet_dropout_at_inference, pass)?;
    let mut cell = DecoderCell::new(g, p, cfg, memory, lengths)?;
    let mut outs = Vec::with_capacity(s);
    let mut attention = Vec::with_capacity(s);
    for st in 0..s {
        let pre = g.slice(pre_all, 0, st * b, (st + 1) * b)?;
        let (o, w) = cell.step(g, p, cfg, pre, pass)?;
        outs.push(o);
        attention.push(w);
    }
    let out = g.concat(&outs, 0)?;
    let frames = nn::linear(g, p, "decoder.frame", out)?;
    let stop = nn::linear(g, p, "decoder.stop", out)?;
    // [S*B, r*bins] time-major -> [B*S*r, bins] batch-major.
    let bm = g.gather_rows(frames, &nn::to_batch_major(b, s))?;
    let pre = g.reshape(bm, &[b * s * r, bins])?;
    let mask: Vec<T> = targets.frame_weights.iter().flat_map(|&w| std::iter::repeat_n(w, bins)).collect();
    let masked = g.dropout_with_mask(pre, mask)?;
    let post = nn::postnet(g, p, "postnet", masked, b, s * r, cfg.postnet_layers, cfg.postnet_kernel)?;
    Ok(DecodeVars { pre, post, stop, attention, steps: s })
}

/// Inference result for one utterance.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub pre: LogSpectrogram,
    pub post: LogSpectrogram,
    pub stop_logits: Vec<f64>,
    /// Per step `[heads, T_in]`.
    pub attention: Vec<Matrix>,
    /// Decoding hit the step limit without a stop decision.
    pub hit_max: bool,
}

fn to_matrix<T: Real>(t: &Tensor<T>) -> Matrix {
    let (rows, cols) = t.as_matrix_dims();
    Matrix { rows, cols, data: t.data().iter().map(|x| x.f64()).collect() }
}

/// Free-running decode of a single utterance (`memory` `[T, d]`).
pub fn decode_free<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    memory: Var,
    max_steps: usize,
    pass: &Pass,
) -> Result<DecodeOutput> {
    let t_in = g.shape(memory)[0];
    let bins = cfg.bins();
    let r = cfg.reduction;
    let mut cell = DecoderCell::new(g, p, cfg, memory, &[t_in])?;
    let mut prev = Tensor::zeros(&[1, bins]);
    let mut frames: Vec<T> = Vec::new();
    let mut stop_logits = Vec::new();
    let mut attention = Vec::new();
    let mut hit_max = true;
    for _ in 0..max_steps.max(1) {
        let x = g.constant(prev.clone());
        let pre = nn::prenet(g, p, "decoder.prenet", x, cfg.prenet_dropout, cfg.prenet_dropout_at_inference, pass)?;
        let (o, w) = cell.step(g, p, cfg, pre, pass)?;
        let f = nn::linear(g, p, "decoder.frame", o)?;
        let s = nn::linear(g, p, "decoder.stop", o)?;
        let fv = g.value(f).data();
        frames.extend_from_slice(fv);
        prev = Tensor::new(vec![1, bins], fv[(r - 1) * bins..].to_vec())?;
        let logit = g.value(s).item().f64();
        stop_logits.push(logit);
        attention.push(to_matrix(g.value(w)));
        if logit > 0.0 {
            hit_max = false;
            break;
        }
    }
    let tout = stop_logits.len() * r;
    let pre_t = Tensor::new(vec![tout, bins], frames)?;
    let pre_v = g.constant(pre_t.clone());
    let post = nn::postnet(g, p, "postnet", pre_v, 1, tout, cfg.postnet_layers, cfg.postnet_kernel)?;
    Ok(DecodeOutput { pre: to_matrix(&pre_t), post: to_matrix(g.value(post)), stop_logits, attention, hit_max })
}

/// Spectrogram decoding: teacher-forced when `targets` is given, free-running
/// otherwise (single utterance).
pub fn decode_spectrogram<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    memory: Var,
    targets: Option<&LogSpectrogram>,
    pass: &Pass,
) -> Result<DecodeOutput> {
    let t_in = g.shape(memory)[0];
    match targets {
        None => decode_free(g, p, cfg, memory, cfg.max_decode_factor * t_in, pass),
        Some(spec) => {
            if spec.rows % cfg.reduction != 0 {
                return Err(Error::Invalid(format!("target has {} frames; pad to a multiple of r = {}", spec.rows, cfg.reduction)));
            }
            let ex = Example {
                features: Matrix::zeros(1, cfg.input_channels()),
                target: Some(spec.clone()),
                source_symbols: vec![],
                target_symbols: vec![],
                speaker: None,
            };
            let tb: TargetBatch<T> = target_batch(&[ex], cfg)?;
            let v = decode_teacher_forced(g, p, cfg, memory, &[t_in], &tb, pass)?;
            let stop = g.value(v.stop).data().iter().map(|x| x.f64()).collect();
            Ok(DecodeOutput {
                pre: to_matrix(g.value(v.pre)),
                post: to_matrix(g.value(v.post)),
                stop_logits: stop,
                attention: v.attention.iter().map(|&w| to_matrix(g.value(w))).collect(),
                hit_max: false,
            })
        }
    }
}

// ------------------------------------------------------------------ phoneme decoders

#[derive(Debug, Clone)]
pub struct PhonemeOutput {
    /// Time-major `[U * B, V + 1]`.
    pub logits: Var,
    pub loss: Var,
    pub steps: usize,
}

/// Teacher-forced phoneme decoder over a batch-major tap `[B*T, d]`. Targets
/// get an end-of-sequence symbol appended; the loss is the mean cross-entropy
/// per target symbol.
#[allow(clippy::too_many_arguments)]
pub fn decode_phonemes<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
    tap: Var,
    lengths: &[usize],
    targets: &[Vec<usize>],
    pass: &Pass,
) -> Result<PhonemeOutput> {
    let b = lengths.len();
    let v = cfg.symbol_vocab;
    let (eos, go) = (v, v + 1);
    if targets.len() != b {
        return Err(Error::Invalid(format!("{} phoneme targets for batch {b}", targets.len())));
    }
    for t in targets {
        if t.is_empty() {
            return Err(Error::Invalid("empty phoneme target".into()));
        }
        if let Some(&s) = t.iter().find(|&&s| s >= v) {
            return Err(Error::Invalid(format!("symbol {s} outside vocabulary of {v}")));
        }
    }
    let u = targets.iter().map(|t| t.len() + 1).max().expect("non-empty");
    let mut inputs = vec![go; u * b];
    let mut classes = vec![eos; u * b];
    let mut weights = vec![T::zero(); u * b];
    for (j, t) in targets.iter().enumerate() {
        for k in 0..=t.len() {
            if k > 0 {
                inputs[k * b + j] = t[k - 1];
            }
            classes[k * b + j] = if k < t.len() { t[k] } else { eos };
            weights[k * b + j] = T::one();
        }
    }
    let table = g.param_from(p, &format!("{prefix}.embed"))?;
    let emb = g.gather_rows(table, &inputs)?;
    let mem = nn::additive_memory(g, p, &format!("{prefix}.attention"), tap, lengths)?;
    let lstms = (0..cfg.aux_layers).map(|l| LstmParams::load(g, p, &format!("{prefix}.lstm{l}"))).collect::<Result<Vec<_>>>()?;
    let mut h: Vec<Var> = (0..cfg.aux_layers).map(|_| g.constant(Tensor::zeros(&[b, cfg.aux_units]))).collect();
    let mut c = h.clone();
    let mut outs = Vec::with_capacity(u);
    for k in 0..u {
        let e = g.slice(emb, 0, k * b, (k + 1) * b)?;
        let query = *h.last().expect("aux layers");
        let att = nn::attend(g, p, &mem, query, cfg.attention_dropout, pass)?;
        let x0 = g.concat(&[e, att.context], 1)?;
        let mut x = nn::dropout(g, x0, cfg.aux_dropout, pass)?;
        for (l, lstm) in lstms.iter().enumerate() {
            (h[l], c[l]) = nn::lstm_step(g, lstm, x, h[l], c[l], cfg.zoneout, pass)?;
            x = h[l];
        }
        outs.push(g.concat(&[x, att.context], 1)?);
    }
    let out = g.concat(&outs, 0)?;
    let out = nn::dropout(g, out, cfg.aux_dropout, pass)?;
    let logits = nn::linear(g, p, &format!("{prefix}.out"), out)?;
    let loss = g.softmax_cross_entropy(logits, &classes, Some(&weights))?;
    Ok(PhonemeOutput { logits, loss, steps: u })
}

/// Per-position argmax of teacher-forced logits, cut at the first end symbol.
pub fn phoneme_predictions<T: Real>(g: &Graph<T>, out: &PhonemeOutput, batch: usize, eos: usize) -> Vec<Vec<usize>> {
    let l = g.value(out.logits);
    let classes = l.shape()[1];
    (0..batch)
        .map(|j| {
            let mut seq = Vec::new();
            for k in 0..out.steps {
                let row = &l.data()[(k * batch + j) * classes..(k * batch + j + 1) * classes];
                let best = (0..classes).max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite")).unwrap_or(eos);
                if best == eos {
                    break;
                }
                seq.push(best);
            }
            seq
        })
        .collect()
}

// ------------------------------------------------------------------ losses

/// Scalar components of one training loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Pre- plus post-net spectrogram MSE.
    pub spec: f64,
    pub stop: f64,
    pub src_aux: Option<f64>,
    pub tgt_aux: Option<f64>,
    /// Aux weight; absent when no auxiliary task is trained.
    pub lambda: Option<f64>,
}

/// `MSE(pre) + MSE(post) + BCE(stop) + λ(step) · Σ aux`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    primary: &DecodeVars,
    targets: &TargetBatch<T>,
    src_aux: Option<Var>,
    tgt_aux: Option<Var>,
    step: u64,
    cfg: &ModelConfig,
) -> Result<(Var, LossBreakdown)> {
    let tf = g.constant(targets.frames.clone());
    if g.shape(primary.pre) != g.shape(tf) || g.value(primary.stop).len() != targets.stop_targets.len() {
        return Err(Error::Invalid(format!("decoder output {:?} vs targets {:?}", g.shape(primary.pre), g.shape(tf))));
    }
    let pre = g.squared_error(primary.pre, tf, Some(&targets.frame_weights))?;
    let post = g.squared_error(primary.post, tf, Some(&targets.frame_weights))?;
    let stop = g.sigmoid_cross_entropy(primary.stop, &targets.stop_targets, Some(&targets.step_weights))?;
    let spec = g.add(pre, post)?;
    let mut total = g.add(spec, stop)?;
    let mut out = LossBreakdown {
        spec: g.value(spec).item().f64(),
        stop: g.value(stop).item().f64(),
        src_aux: src_aux.map(|v| g.value(v).item().f64()),
        tgt_aux: tgt_aux.map(|v| g.value(v).item().f64()),
        ..Default::default()
    };
    let aux: Vec<Var> = [src_aux, tgt_aux].into_iter().flatten().collect();
    if !aux.is_empty() {
        let lambda = cfg.aux_weight.at(step);
        let sum = if aux.len() == 2 { g.add(aux[0], aux[1])? } else { aux[0] };
        let weighted = g.scale(sum, T::lit(lambda))?;
        total = g.add(total, weighted)?;
        out.lambda = Some(lambda);
    }
    out.total = g.value(total).item().f64();
    Ok((total, out))
}

/// Everything one training step computes.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub decode: DecodeVars,
    pub src_aux: Option<PhonemeOutput>,
    pub tgt_aux: Option<PhonemeOutput>,
}

/// Full teacher-forced forward pass and loss on a batch.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    batch: &Batch<T>,
    aux: AuxMode,
    step: u64,
    pass: &Pass,
) -> Result<ForwardOutput> {
    let targets = batch.targets.as_ref().ok_or_else(|| Error::Invalid("batch has no target spectrograms".into()))?;
    let x = g.constant(batch.features.clone());
    let enc = encode(g, p, cfg, x, &batch.src_lengths, pass)?;
    let src_aux = if aux.source() {
        let tap = enc.tap(g, cfg.aux_source_tap)?;
        Some(decode_phonemes(g, p, cfg, SOURCE_AUX, tap, &batch.src_lengths, &batch.source_symbols, pass)?)
    } else {
        None
    };
    let tgt_aux = if aux.target() {
        let tap = enc.tap(g, cfg.aux_target_tap)?;
        Some(decode_phonemes(g, p, cfg, TARGET_AUX, tap, &batch.src_lengths, &batch.target_symbols, pass)?)
    } else {
        None
    };
    let mem = memory(g, p, cfg, &enc, batch.speakers.as_ref())?;
    let decode = decode_teacher_forced(g, p, cfg, mem, &batch.src_lengths, targets, pass)?;
    let (loss, breakdown) = total_loss(g, &decode, targets, src_aux.as_ref().map(|a| a.loss), tgt_aux.as_ref().map(|a| a.loss), step, cfg)?;
    Ok(ForwardOutput { loss, breakdown, decode, src_aux, tgt_aux })
}

/// Encoder pre-training loss: translated phonemes from the top encoder layer.
pub fn pretrain_forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    batch: &Batch<T>,
    pass: &Pass,
) -> Result<PhonemeOutput> {
    let x = g.constant(batch.features.clone());
    let enc = encode(g, p, cfg, x, &batch.src_lengths, pass)?;
    let tap = enc.tap(g, cfg.encoder_layers)?;
    decode_phonemes(g, p, cfg, PRETRAIN_AUX, tap, &batch.src_lengths, &batch.target_symbols, pass)
}

// ------------------------------------------------------------------ synthesis

/// Source waveform → translated waveform. Auxiliary decoders are never used.
pub fn synthesize(
    source: &Waveform,
    speaker: Option<&SpeakerEmbedding>,
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
) -> Result<(Waveform, DecodeOutput)> {
    let fx = FeatureExtractor::new(cfg.input_stft, cfg.n_mels, cfg.feature_recipe)?;
    let feats = fx.features(source)?;
    let ex = Example { features: feats, target: None, source_symbols: vec![], target_symbols: vec![], speaker: speaker.cloned() };
    let batch: Batch<f32> = Batch::new(&[ex], cfg)?;
    let pass = Pass::infer();
    let mut g = Graph::inference();
    let x = g.constant(batch.features.clone());
    let enc = encode(&mut g, params, cfg, x, &batch.src_lengths, &pass)?;
    let mem = memory(&mut g, params, cfg, &enc, batch.speakers.as_ref())?;
    let out = decode_free(&mut g, params, cfg, mem, cfg.max_decode_factor * batch.src_seq, &pass)?;
    if out.hit_max {
        log::warn!("decoding reached {} steps without a stop decision", out.stop_logits.len());
    }
    let mag = out.post.map(f64::exp);
    let wav = griffin_lim(&mag, &cfg.output_stft, cfg.griffin_lim_iters, None)?.waveform;
    Ok((wav, out))
}
