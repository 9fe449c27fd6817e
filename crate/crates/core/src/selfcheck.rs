//! Finite-difference gradient suite: every registered op, each network block,
//! and a micro configuration of the whole model, all in 64-bit.

use rand::Rng;
use s2st_tensor::{grad_check, gradcheck, Graph, OpKind, ParamStore, Tensor, Var};

use crate::config::{AuxMode, AuxWeight, ModelConfig};
use crate::dsp::{Matrix, StftConfig, Window};
use crate::error::Result;
use crate::model::{self, Batch, Example};
use crate::nn::{self, Init, LstmParams, Pass};
use crate::speaker::{speaker_embed, SpeakerSpec};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-6;
/// Step for the five-point stencil used on blocks and the whole model. Exactly
/// zero gradients (masked frames, dropped units, unused embeddings) are common
/// there, and small steps would turn rounding noise into relative error.
const STENCIL_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

/// Every registered op on its default shapes.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    OpKind::ALL
        .iter()
        .map(|&k| Ok(CheckResult { name: format!("op {k}"), error: grad_check(k, &[], seed, EPS)?, tolerance: OP_TOLERANCE }))
        .collect()
}

fn random(shape: &[usize], seed: u64, name: &str, lo: f64, hi: f64) -> Result<Tensor<f64>> {
    let mut r = s2st_tensor::rng::stream(seed, name, 0, 0);
    let n = shape.iter().product();
    Ok(Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect())?)
}

/// Adds a fixed random readout `sum(y ⊙ w)` so non-scalar blocks have a loss.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random(g.shape(y), seed, "selfcheck.readout", -1.0, 1.0)?;
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p)?)
}

/// Zero-initialized biases can put ReLU inputs exactly on the kink (e.g. when
/// dropout clears a layer's whole input); checks use random biases instead.
fn jitter_biases(store: &mut ParamStore<f64>, seed: u64) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).filter(|n| n.ends_with(".b")).collect();
    for n in names {
        let t = store.get_mut(&n).expect("listed");
        let noise = random(t.shape(), seed, &format!("selfcheck.bias.{n}"), -0.5, 0.5)?;
        t.add_assign(&noise);
    }
    Ok(())
}

fn block(
    name: &str,
    mut store: ParamStore<f64>,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<CheckResult> {
    jitter_biases(&mut store, seed)?;
    let error = gradcheck::check_param_gradients(&store, STENCIL_EPS, None, seed, |g, p| {
        f(g, p).map_err(|e| s2st_tensor::TensorError::InvalidArgument(e.to_string()))
    })?;
    Ok(CheckResult { name: format!("block {name}"), error, tolerance: OP_TOLERANCE })
}

/// The network building blocks, with dropout and zoneout masks held fixed.
pub fn block_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let (b, t, d, h) = (2usize, 3usize, 3usize, 4usize);

    let mut s = ParamStore::new();
    Init { store: &mut s, seed }.lstm("lstm", d, h)?;
    s.insert("x", random(&[b, d], seed, "x", -1.0, 1.0)?)?;
    s.insert("h", random(&[b, h], seed, "h", -1.0, 1.0)?)?;
    s.insert("c", random(&[b, h], seed, "c", -1.0, 1.0)?)?;
    out.push(block("lstm step (zoneout 0.3)", s, seed, |g, p| {
        let l = LstmParams::load(g, p, "lstm")?;
        let (x, h0, c0) = (g.param_from(p, "x")?, g.param_from(p, "h")?, g.param_from(p, "c")?);
        let (h1, c1) = nn::lstm_step(g, &l, x, h0, c0, 0.3, &Pass::train(seed, 0))?;
        let both = g.concat(&[h1, c1], 1)?;
        readout(g, both, seed)
    })?);

    let mut s = ParamStore::new();
    let mut init = Init { store: &mut s, seed };
    init.lstm("fwd", d, h)?;
    init.lstm("bwd", d, h)?;
    s.insert("x", random(&[t * b, d], seed, "x", -1.0, 1.0)?)?;
    out.push(block("bidirectional lstm (ragged)", s, seed, |g, p| {
        let (f, r) = (LstmParams::load(g, p, "fwd")?, LstmParams::load(g, p, "bwd")?);
        let x = g.param_from(p, "x")?;
        let y = nn::blstm_layer(g, x, &[3, 2], &f, &r, 0.0, &Pass::infer())?;
        readout(g, y, seed)
    })?);

    for heads in [1usize, 2] {
        let mut s = ParamStore::new();
        let mut init = Init { store: &mut s, seed };
        let m = 4;
        if heads == 1 {
            init.attention("att", h, m, 3)?;
        } else {
            init.multihead_attention("att", h, m)?;
        }
        s.insert("mem", random(&[b * t, m], seed, "mem", -1.0, 1.0)?)?;
        s.insert("q", random(&[b, h], seed, "q", -1.0, 1.0)?)?;
        let name = format!("{heads}-head additive attention (masked, dropout 0.2)");
        out.push(block(&name, s, seed, move |g, p| {
            let (mem, q) = (g.param_from(p, "mem")?, g.param_from(p, "q")?);
            let am = if heads == 1 {
                nn::additive_memory(g, p, "att", mem, &[3, 2])?
            } else {
                nn::multihead_memory(g, p, "att", mem, &[3, 2], heads)?
            };
            let r = nn::attend(g, p, &am, q, 0.2, &Pass::train(seed, 1))?;
            let y = g.concat(&[r.context], 1)?;
            readout(g, y, seed)
        })?);
    }

    let mut s = ParamStore::new();
    Init { store: &mut s, seed }.prenet("prenet", d, 4)?;
    s.insert("x", random(&[b, d], seed, "x", -1.0, 1.0)?)?;
    out.push(block("prenet (dropout 0.5)", s, seed, |g, p| {
        let x = g.param_from(p, "x")?;
        let y = nn::prenet(g, p, "prenet", x, 0.5, false, &Pass::train(seed, 2))?;
        readout(g, y, seed)
    })?);

    let bins = 3;
    let mut s = ParamStore::new();
    Init { store: &mut s, seed }.postnet("postnet", bins, 4, 3, 3)?;
    s.insert("x", random(&[b * t, bins], seed, "x", -1.0, 1.0)?)?;
    out.push(block("postnet", s, seed, move |g, p| {
        let x = g.param_from(p, "x")?;
        let y = nn::postnet(g, p, "postnet", x, b, t, 3, 3)?;
        readout(g, y, seed)
    })?);
    Ok(out)
}

/// Smallest configuration that still exercises every model path: stacked
/// BLSTM encoder, multi-head attention, reduction 2, post-net, both auxiliary
/// decoders and speaker conditioning.
pub fn micro_config() -> ModelConfig {
    let stft = StftConfig { sample_rate: 8000, window_length: 16, hop_length: 4, fft_size: 16, window: Window::Hann };
    ModelConfig {
        n_mels: 2,
        input_stft: stft,
        output_stft: stft,
        symbol_vocab: 3,
        encoder_layers: 2,
        encoder_units: 2,
        decoder_layers: 2,
        decoder_units: 3,
        attention_heads: 2,
        prenet_units: 3,
        postnet_layers: 2,
        postnet_channels: 3,
        postnet_kernel: 3,
        reduction: 2,
        aux_layers: 1,
        aux_units: 3,
        aux_attention_units: 3,
        aux_embedding: 2,
        aux_source_tap: 1,
        aux_target_tap: 2,
        aux_weight: AuxWeight::Constant { value: 0.7 },
        speaker_conditioning: true,
        speaker_projection: 2,
        batch_size: 2,
        ..ModelConfig::toy()
    }
}

/// Two short random examples for [`micro_config`].
pub fn micro_batch(cfg: &ModelConfig, seed: u64) -> Result<Batch<f64>> {
    let mut r = s2st_tensor::rng::stream(seed, "selfcheck.batch", 0, 0);
    let mut mat =
        |rows: usize, cols: usize, lo: f64, hi: f64| Matrix::new(rows, cols, (0..rows * cols).map(|_| r.random_range(lo..hi)).collect());
    let c = cfg.input_channels();
    let examples = vec![
        Example {
            features: mat(4, c, -1.0, 1.0)?,
            target: Some(mat(4, cfg.bins(), -3.0, 0.0)?),
            source_symbols: vec![0, 2],
            target_symbols: vec![2, 1, 0],
            speaker: Some(speaker_embed(&SpeakerSpec::canonical())?),
        },
        Example {
            features: mat(3, c, -1.0, 1.0)?,
            target: Some(mat(3, cfg.bins(), -3.0, 0.0)?),
            source_symbols: vec![1],
            target_symbols: vec![1, 1],
            speaker: Some(speaker_embed(&SpeakerSpec { speaker_id: 1, f0: 130.0, tilt: -2.0 })?),
        },
    ];
    Batch::new(&examples, cfg)
}

/// Per-parameter worst relative error of the whole-model training loss
/// (dropout and zoneout active with fixed masks), on a sample of elements
/// from every parameter tensor.
pub fn model_report(seed: u64) -> Result<Vec<(String, f64)>> {
    let cfg = micro_config();
    cfg.validate()?;
    let mut params = model::init_params::<f64>(&cfg, AuxMode::Both, seed)?;
    jitter_biases(&mut params, seed)?;
    let batch = micro_batch(&cfg, seed)?;
    Ok(gradcheck::param_gradient_report(&params, STENCIL_EPS, Some(6), seed, |g, p| {
        let out = model::forward(g, p, &cfg, &batch, AuxMode::Both, 0, &Pass::train(seed, 0))
            .map_err(|e| s2st_tensor::TensorError::InvalidArgument(e.to_string()))?;
        Ok(out.loss)
    })?)
}

pub fn model_check(seed: u64) -> Result<CheckResult> {
    let error = model_report(seed)?.into_iter().fold(0.0, |m, (_, e)| f64::max(m, e));
    Ok(CheckResult { name: "micro whole model".into(), error, tolerance: MODEL_TOLERANCE })
}

pub fn suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(seed)?;
    out.extend(block_checks(seed)?);
    out.push(model_check(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_config_is_valid() {
        let cfg = micro_config();
        cfg.validate().unwrap();
        let b = micro_batch(&cfg, 3).unwrap();
        assert_eq!(b.size, 2);
        assert_eq!(b.src_lengths, vec![4, 3]);
    }
}
