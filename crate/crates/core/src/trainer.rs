//! Optimization: Adafactor, Gaussian weight noise, checkpoints, the teacher-forced
//! training loop and encoder pre-training.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use s2st_tensor::{Graph, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{AuxMode, ModelConfig};
use crate::corpus::{load_split, CorpusManifest, Split};
use crate::dsp::FeatureExtractor;
use crate::error::{io_err, Error, Result};
use crate::model::{self, Batch, Example, LossBreakdown};
use crate::nn::Pass;
use crate::speaker::speaker_embed;

// ------------------------------------------------------------------ Adafactor

pub const ADAFACTOR_EPS1: f32 = 1e-30;
pub const ADAFACTOR_CLIP: f32 = 1.0;
const DECAY_EXPONENT: f64 = -0.8;

/// Second-moment accumulators of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Moments {
    /// Row and column sums for parameters of rank ≥ 2 (viewed as
    /// `[prod(leading dims), last dim]`).
    Factored {
        row: Vec<f32>,
        col: Vec<f32>,
    },
    Full(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdafactorState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / cols.max(1), cols)
}

/// One Adafactor update of `param` in place. `t` is the 1-based step.
pub fn adafactor_update(param: &mut Tensor<f32>, grad: &Tensor<f32>, m: &mut Moments, lr: f32, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Invalid("adafactor step must start at 1".into()));
    }
    if param.shape() != grad.shape() {
        return Err(Error::Invalid(format!("gradient {:?} for parameter {:?}", grad.shape(), param.shape())));
    }
    if !grad.all_finite() {
        return Err(Error::Invalid("non-finite gradient".into()));
    }
    let beta = (1.0 - (t as f64).powf(DECAY_EXPONENT)) as f32;
    let g = grad.data();
    // Scaled updates in f64: factored estimates of ε-sized rows and columns
    // underflow f32.
    let mut u = vec![0f64; g.len()];
    match m {
        Moments::Factored { row, col } => {
            let (rows, cols) = matrix_dims(param.shape());
            if row.len() != rows || col.len() != cols {
                return Err(Error::Invalid("factored moments do not match parameter".into()));
            }
            let mut rs = vec![0f32; rows];
            let mut cs = vec![0f32; cols];
            for r in 0..rows {
                for c in 0..cols {
                    let v = g[r * cols + c] * g[r * cols + c] + ADAFACTOR_EPS1;
                    rs[r] += v;
                    cs[c] += v;
                }
            }
            for (a, s) in row.iter_mut().zip(&rs) {
                *a = beta * *a + (1.0 - beta) * s;
            }
            for (a, s) in col.iter_mut().zip(&cs) {
                *a = beta * *a + (1.0 - beta) * s;
            }
            let total: f64 = row.iter().map(|&x| x as f64).sum();
            for r in 0..rows {
                for c in 0..cols {
                    let v = row[r] as f64 * col[c] as f64 / total;
                    u[r * cols + c] = g[r * cols + c] as f64 / v.sqrt();
                }
            }
        }
        Moments::Full(v) => {
            if v.len() != g.len() {
                return Err(Error::Invalid("moments do not match parameter".into()));
            }
            for ((a, &gi), ui) in v.iter_mut().zip(g).zip(u.iter_mut()) {
                *a = beta * *a + (1.0 - beta) * (gi * gi + ADAFACTOR_EPS1);
                *ui = gi as f64 / (*a as f64).sqrt();
            }
        }
    }
    let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len().max(1) as f64).sqrt();
    let denom = (rms / ADAFACTOR_CLIP as f64).max(1.0);
    for (p, ui) in param.data_mut().iter_mut().zip(&u) {
        *p -= (lr as f64 * ui / denom) as f32;
    }
    Ok(())
}

impl AdafactorState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let moments = params
            .iter()
            .map(|(n, t)| {
                let m = if t.rank() >= 2 {
                    let (r, c) = matrix_dims(t.shape());
                    Moments::Factored { row: vec![0.0; r], col: vec![0.0; c] }
                } else {
                    Moments::Full(vec![0.0; t.len()])
                };
                (n.clone(), m)
            })
            .collect();
        AdafactorState { step: 0, moments }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn apply(&mut self, params: &mut ParamStore<f32>, grads: &s2st_tensor::Gradients<f32>, lr: f32) -> Result<()> {
        self.step += 1;
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).ok_or_else(|| Error::Invalid(format!("gradient for unknown `{name}`")))?;
            let m = self.moments.get_mut(name).ok_or_else(|| Error::Invalid(format!("no optimizer state for `{name}`")))?;
            adafactor_update(p, g, m, lr, self.step).map_err(|e| Error::Invalid(format!("{name}: {e}")))?;
            if !p.all_finite() {
                return Err(Error::Invalid(format!("{name}: update produced a non-finite value")));
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ weight noise

/// LSTM weight matrices (not biases, not projections).
pub fn is_lstm_weight(name: &str) -> bool {
    let Some(stem) = name.strip_suffix(".W") else { return false };
    let last = stem.rsplit('.').next().unwrap_or("");
    last == "fwd" || last == "bwd" || last.starts_with("lstm")
}

/// Copy of `params` with fresh N(0, stddev²) noise on every LSTM weight matrix.
pub fn apply_weight_noise(params: &ParamStore<f32>, stddev: f64, seed: u64, step: u64) -> Result<ParamStore<f32>> {
    if stddev.is_nan() || stddev < 0.0 {
        return Err(Error::Invalid(format!("weight noise stddev {stddev} < 0")));
    }
    let mut out = params.clone();
    if stddev == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, stddev).map_err(|e| Error::Invalid(e.to_string()))?;
    for (i, name) in params.names().enumerate() {
        if !is_lstm_weight(name) {
            continue;
        }
        let mut r = s2st_tensor::rng::stream(seed, "trainer.weight-noise", step, i as u64);
        for x in out.get_mut(name).expect("cloned").data_mut() {
            *x += normal.sample(&mut r) as f32;
        }
    }
    Ok(out)
}

// ------------------------------------------------------------------ checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S2ST";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: AdafactorState,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    step: u64,
    optimizer_step: u64,
    config: ModelConfig,
}

fn write_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
    let rank = u8::try_from(shape.len()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let n = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?.to_string();
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.filter(|&c| c <= self.buf.len() / 4).ok_or_else(|| Error::Checkpoint(format!("bad shape for {name}")))?;
        let data = self.take(count * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
        Ok((name, shape, data))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            write_tensor(&mut out, name, t.shape(), t.data())?;
        }
        let mut opt = Vec::new();
        for (name, m) in &self.optimizer.moments {
            match m {
                Moments::Factored { row, col } => {
                    opt.push((format!("{name}#row"), row));
                    opt.push((format!("{name}#col"), col));
                }
                Moments::Full(v) => opt.push((format!("{name}#full"), v)),
            }
        }
        out.extend_from_slice(&(opt.len() as u32).to_le_bytes());
        for (name, v) in opt {
            write_tensor(&mut out, &name, &[v.len()], v)?;
        }
        let meta = CheckpointMeta { step: self.step, optimizer_step: self.optimizer.step, config: self.config.clone() };
        let json = serde_json::to_vec(&meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let (name, shape, data) = r.tensor()?;
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        let mut moments: BTreeMap<String, Moments> = BTreeMap::new();
        for _ in 0..r.u32()? {
            let (name, _, data) = r.tensor()?;
            let (param, kind) = name.rsplit_once('#').ok_or_else(|| Error::Checkpoint(format!("bad optimizer slot {name}")))?;
            let entry = moments.entry(param.to_string());
            match kind {
                "full" => {
                    entry.or_insert(Moments::Full(data));
                }
                "row" | "col" => {
                    let m = entry.or_insert(Moments::Factored { row: vec![], col: vec![] });
                    let Moments::Factored { row, col } = m else {
                        return Err(Error::Checkpoint(format!("mixed optimizer slots for {param}")));
                    };
                    *(if kind == "row" { row } else { col }) = data;
                }
                _ => return Err(Error::Checkpoint(format!("bad optimizer slot {name}"))),
            }
        }
        let n = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { config: meta.config, params, optimizer: AdafactorState { step: meta.optimizer_step, moments }, step: meta.step })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::File::create(path).and_then(|mut f| f.write_all(&bytes)).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(io_err(path))?;
        Checkpoint::from_bytes(&buf)
    }
}

// ------------------------------------------------------------------ data

/// Feature-space copy of one corpus split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub ids: Vec<usize>,
}

/// Loads `split` of the corpus at `dir` and computes model inputs and targets.
/// With speaker conditioning on, each example carries its target speaker's
/// oracle embedding.
pub fn load_dataset(dir: &Path, cfg: &ModelConfig, split: Split) -> Result<Dataset> {
    let m = CorpusManifest::load(dir.join("manifest.json"))?;
    let items = load_split(dir, &m, split)?;
    let fin = FeatureExtractor::new(cfg.input_stft, cfg.n_mels, cfg.feature_recipe)?;
    let fout = FeatureExtractor::new(cfg.output_stft, cfg.n_mels, cfg.feature_recipe)?;
    let mut examples = Vec::with_capacity(items.len());
    let mut ids = Vec::with_capacity(items.len());
    for it in items {
        if it.src_wav.sample_rate != cfg.input_stft.sample_rate || it.tgt_wav.sample_rate != cfg.output_stft.sample_rate {
            return Err(Error::Config(format!(
                "corpus sample rate {} does not match the model's {}/{}",
                it.src_wav.sample_rate, cfg.input_stft.sample_rate, cfg.output_stft.sample_rate
            )));
        }
        let speaker = if cfg.speaker_conditioning { Some(speaker_embed(&m.speaker(it.record.tgt_speaker)?)?) } else { None };
        examples.push(Example {
            features: fin.features(&it.src_wav)?,
            target: Some(fout.log_spectrogram(&it.tgt_wav)?),
            source_symbols: it.source.symbols(),
            target_symbols: it.target.symbols(),
            speaker,
        });
        ids.push(it.record.id);
    }
    Ok(Dataset { examples, ids })
}

/// Epoch-shuffled minibatch order, reproducible from the seed.
pub struct Batches {
    n: usize,
    size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    pub fn new(n: usize, size: usize, seed: u64) -> Self {
        Batches { n, size: size.min(n).max(1), seed, epoch: 0, order: vec![], pos: usize::MAX }
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos == usize::MAX || self.pos + self.size > self.n {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut s2st_tensor::rng::stream(self.seed, "trainer.shuffle", self.epoch, 0));
            self.epoch += 1;
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        out
    }
}

// ------------------------------------------------------------------ training loop

pub const METRICS_HEADER: &str = "step,spec_loss,src_aux,tgt_aux,lambda,stop_loss";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn metrics_line(step: u64, l: &LossBreakdown) -> String {
    format!("{step},{:.6},{},{},{},{:.6}", l.spec, opt(l.src_aux), opt(l.tgt_aux), opt(l.lambda), l.stop)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub aux: AuxMode,
    pub steps: u64,
    pub seed: u64,
    /// Checkpoints and `metrics.csv` are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Pre-trained tensors copied into the fresh model by name.
    pub init_from: Option<ParamStore<f32>>,
    pub log_every: u64,
}

impl TrainOptions {
    pub fn new(aux: AuxMode, steps: u64, seed: u64) -> Self {
        TrainOptions { aux, steps, seed, out_dir: None, init_from: None, log_every: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<(u64, LossBreakdown)>,
}

impl TrainReport {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for (step, l) in &self.metrics {
            s.push_str(&metrics_line(*step, l));
            s.push('\n');
        }
        s
    }
}

/// Copies every tensor of `pre` into `params`; names must exist with equal shapes.
pub fn load_pretrained(params: &mut ParamStore<f32>, pre: &ParamStore<f32>) -> Result<usize> {
    for (name, t) in pre.iter() {
        let dst = params.get(name).ok_or_else(|| Error::Checkpoint(format!("pre-trained `{name}` not in model")))?;
        if dst.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for `{name}`: model {:?}, pre-trained {:?}", dst.shape(), t.shape())));
        }
        params.set(name, t.clone())?;
    }
    Ok(pre.len())
}

fn write_checkpoint(dir: Option<&Path>, ck: &Checkpoint, name: &str) -> Result<()> {
    if let Some(d) = dir {
        ck.save(d.join(name))?;
    }
    Ok(())
}

/// Loss of one batch at a step: the graph node to differentiate and its breakdown.
type LossFn<'a> = dyn Fn(&mut Graph<f32>, &ParamStore<f32>, &Batch<f32>, u64, &Pass) -> Result<(s2st_tensor::Var, LossBreakdown)> + 'a;

/// Generic optimisation loop shared by training and pre-training.
fn optimise(
    data: &Dataset,
    cfg: &ModelConfig,
    mut params: ParamStore<f32>,
    opts: &TrainOptions,
    loss_fn: &LossFn<'_>,
) -> Result<TrainReport> {
    if data.examples.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let out_dir = opts.out_dir.as_deref();
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut csv = match out_dir {
        Some(d) => {
            let p = d.join("metrics.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&p).map_err(io_err(&p))?);
            writeln!(f, "{METRICS_HEADER}").map_err(io_err(&p))?;
            Some((f, p))
        }
        None => None,
    };
    let mut state = AdafactorState::new(&params);
    let mut batches = Batches::new(data.examples.len(), cfg.batch_size, opts.seed);
    let mut metrics = Vec::with_capacity(opts.steps as usize);
    let lr = cfg.learning_rate as f32;
    for step in 0..opts.steps {
        let idx = batches.next_indices();
        let exs: Vec<Example> = idx.iter().map(|&i| data.examples[i].clone()).collect();
        let batch = Batch::new(&exs, cfg)?;
        let noisy = apply_weight_noise(&params, cfg.weight_noise, opts.seed, step)?;
        let pass = Pass::train(opts.seed, step);
        let mut g = Graph::new();
        let (loss, br) = loss_fn(&mut g, &noisy, &batch, step, &pass)?;
        if !br.total.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: format!("{br:?}") });
        }
        let grads = g.backward(loss)?;
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss { step, detail: "non-finite gradient".into() });
        }
        state.apply(&mut params, &grads, lr)?;
        if let Some((f, p)) = csv.as_mut() {
            writeln!(f, "{}", metrics_line(step, &br)).map_err(io_err(&*p))?;
        }
        if opts.log_every > 0 && step % opts.log_every == 0 {
            log::info!("step {step}: {}", metrics_line(step, &br));
        }
        metrics.push((step, br));
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < opts.steps {
            let ck = Checkpoint { config: cfg.clone(), params: params.clone(), optimizer: state.clone(), step: done };
            write_checkpoint(out_dir, &ck, &format!("ckpt-{done}.s2st"))?;
        }
    }
    if let Some((mut f, p)) = csv {
        f.flush().map_err(io_err(p))?;
    }
    let checkpoint = Checkpoint { config: cfg.clone(), params, optimizer: state, step: opts.steps };
    write_checkpoint(out_dir, &checkpoint, "final.s2st")?;
    Ok(TrainReport { checkpoint, metrics })
}

/// Trains the full model with the auxiliary tasks of `opts.aux`.
pub fn train(data: &Dataset, cfg: &ModelConfig, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let mut params = model::init_params::<f32>(cfg, opts.aux, opts.seed)?;
    if let Some(pre) = &opts.init_from {
        let n = load_pretrained(&mut params, pre)?;
        log::info!("initialised {n} tensors from a pre-trained encoder");
    }
    let aux = opts.aux;
    optimise(data, cfg, params, opts, &|g, p, batch, step, pass| {
        let out = model::forward(g, p, cfg, batch, aux, step, pass)?;
        Ok((out.loss, out.breakdown))
    })
}

/// Trains the encoder with a translated-phoneme decoder on its top layer and
/// keeps only the bottom `k_layers` encoder layers.
pub fn pretrain_encoder(data: &Dataset, cfg: &ModelConfig, k_layers: usize, opts: &TrainOptions) -> Result<Checkpoint> {
    cfg.validate()?;
    if k_layers == 0 || k_layers > cfg.encoder_layers {
        return Err(Error::Config(format!("cannot keep {k_layers} of {} encoder layers", cfg.encoder_layers)));
    }
    let params = model::init_pretrain_params::<f32>(cfg, opts.seed)?;
    let report = optimise(data, cfg, params, &TrainOptions { out_dir: None, ..opts.clone() }, &|g, p, batch, _, pass| {
        let out = model::pretrain_forward(g, p, cfg, batch, pass)?;
        let v = g.value(out.loss).item() as f64;
        Ok((out.loss, LossBreakdown { total: v, tgt_aux: Some(v), ..Default::default() }))
    })?;
    let mut ck = report.checkpoint;
    let keep: Vec<String> = (0..k_layers).map(model::encoder_layer_prefix).collect();
    ck.params.retain(|n| keep.iter().any(|k| n.starts_with(k.as_str())));
    ck.optimizer = AdafactorState::new(&ck.params);
    if let Some(d) = &opts.out_dir {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
        ck.save(d.join("encoder.s2st"))?;
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lstm_weight_scope() {
        assert!(is_lstm_weight("encoder.layer0.fwd.W"));
        assert!(is_lstm_weight("decoder.lstm1.W"));
        assert!(is_lstm_weight("aux.src.lstm0.W"));
        assert!(!is_lstm_weight("decoder.lstm1.b"));
        assert!(!is_lstm_weight("decoder.frame.W"));
        assert!(!is_lstm_weight("postnet.conv0.W"));
        assert!(!is_lstm_weight("speaker.proj"));
    }

    #[test]
    fn zero_gradient_keeps_param() {
        let mut p = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[2, 3]);
        let mut m = Moments::Factored { row: vec![0.0; 2], col: vec![0.0; 3] };
        adafactor_update(&mut p, &g, &mut m, 0.1, 1).unwrap();
        assert_eq!(p, before);
        let bad = Tensor::new(vec![2, 3], vec![f32::NAN; 6]).unwrap();
        assert!(adafactor_update(&mut p, &bad, &mut m, 0.1, 2).is_err());
        assert!(adafactor_update(&mut p, &g, &mut m, 0.1, 0).is_err());
    }

    #[test]
    fn batches_cover_epoch() {
        let mut b = Batches::new(10, 3, 1);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| b.next_indices()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }
}
