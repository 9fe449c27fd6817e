//! Neural building blocks: zoneout LSTM cells, bidirectional layers, additive
//! attention (single and multi-head), pre-net and post-net.
//!
//! Sequences are batched. Recurrent code works on time-major `[T*B, d]`
//! matrices (row `t*B + b`); attention memories and the post-net use
//! batch-major `[B*T, d]` (row `b*T + t`). A single unbatched sequence is the
//! `B = 1` case of both.

use std::cell::Cell;

use rand::Rng;
use s2st_tensor::rng::Stream;
use s2st_tensor::{Graph, ParamStore, RandomKey, Real, Tensor, Var};

use crate::error::{Error, Result};

/// Score bias that removes padded memory frames from the softmax.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Mode and randomness of one forward pass. Every stochastic op draws from its
/// own counter-keyed stream, so a pass is reproducible from `(seed, step)`.
#[derive(Debug)]
pub struct Pass {
    pub mode: Mode,
    key: RandomKey,
    counter: Cell<u64>,
}

impl Pass {
    pub fn train(seed: u64, step: u64) -> Self {
        Pass { mode: Mode::Train, key: RandomKey::new(seed, step), counter: Cell::new(0) }
    }

    pub fn infer() -> Self {
        Pass { mode: Mode::Infer, key: RandomKey::new(0, 0), counter: Cell::new(0) }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn stream(&self, purpose: &str) -> Stream {
        let i = self.counter.get();
        self.counter.set(i + 1);
        self.key.stream(purpose, i)
    }
}

fn param<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str) -> Result<Var> {
    Ok(g.param_from(p, name)?)
}

/// Inverted dropout, active in train mode only.
pub fn dropout<T: Real>(g: &mut Graph<T>, x: Var, rate: f64, pass: &Pass) -> Result<Var> {
    if !pass.is_train() || rate == 0.0 {
        return Ok(x);
    }
    Ok(g.dropout(x, rate, Some(&mut pass.stream("dropout")))?)
}

/// `x·W + b` with parameters `{prefix}.W` and `{prefix}.b`.
pub fn linear<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = param(g, p, &format!("{prefix}.W"))?;
    let b = param(g, p, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

// ------------------------------------------------------------------ initialization

/// Deterministic parameter initialization keyed by name.
pub struct Init<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
}

impl<T: Real> Init<'_, T> {
    fn uniform(&mut self, name: &str, shape: &[usize], limit: f64) -> Result<()> {
        let mut r = s2st_tensor::rng::stream(self.seed, name, 0, 0);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(r.random_range(-limit..=limit))).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?)?;
        Ok(())
    }

    /// Glorot-uniform matrix `[fan_in, fan_out]`.
    pub fn matrix(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], limit)
    }

    pub fn vector(&mut self, name: &str, n: usize, limit: f64) -> Result<()> {
        self.uniform(name, &[n], limit)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, T::lit(v)))?;
        Ok(())
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.matrix(&format!("{prefix}.W"), fan_in, fan_out)?;
        self.constant(&format!("{prefix}.b"), &[fan_out], 0.0)
    }

    /// LSTM weights `[in+h, 4h]` and bias `[4h]` with forget-gate bias 1.
    pub fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) -> Result<()> {
        self.matrix(&format!("{prefix}.W"), input + hidden, 4 * hidden)?;
        let b: Vec<T> = (0..4 * hidden).map(|i| if (hidden..2 * hidden).contains(&i) { T::one() } else { T::zero() }).collect();
        self.store.insert(format!("{prefix}.b"), Tensor::new(vec![4 * hidden], b)?)?;
        Ok(())
    }

    pub fn attention(&mut self, prefix: &str, query: usize, memory: usize, units: usize) -> Result<()> {
        self.matrix(&format!("{prefix}.Wq"), query, units)?;
        self.matrix(&format!("{prefix}.Wk"), memory, units)?;
        self.vector(&format!("{prefix}.v"), units, (3.0 / units as f64).sqrt())
    }

    /// Multi-head attention adds value and output projections.
    pub fn multihead_attention(&mut self, prefix: &str, query: usize, memory: usize) -> Result<()> {
        self.attention(prefix, query, memory, memory)?;
        self.matrix(&format!("{prefix}.Wv"), memory, memory)?;
        self.matrix(&format!("{prefix}.Wo"), memory, memory)
    }
}

// ------------------------------------------------------------------ LSTM

/// Graph handles of one LSTM's parameters, with `W` split into its input and
/// recurrent blocks. Gate order i, f, g, o.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn load<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let w = param(g, p, &format!("{prefix}.W"))?;
        let b = param(g, p, &format!("{prefix}.b"))?;
        let shape = g.shape(w).to_vec();
        if shape.len() != 2 || !shape[1].is_multiple_of(4) || shape[0] < shape[1] / 4 || g.shape(b) != [shape[1]] {
            return Err(Error::Invalid(format!("{prefix}: inconsistent LSTM shapes {shape:?} / {:?}", g.shape(b))));
        }
        let hidden = shape[1] / 4;
        let input = shape[0] - hidden;
        let w_x = g.slice(w, 0, 0, input)?;
        let w_h = g.slice(w, 0, input, input + hidden)?;
        Ok(LstmParams { w_x, w_h, b, input, hidden })
    }
}

fn check_zoneout(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid(format!("zoneout probability {p} outside [0, 1]")));
    }
    Ok(())
}

fn zoneout<T: Real>(g: &mut Graph<T>, prev: Var, new: Var, p: f64, pass: &Pass) -> Result<Var> {
    if p == 0.0 {
        return Ok(new);
    }
    match pass.mode {
        Mode::Infer => Ok(g.zoneout_expect(prev, new, T::lit(p))?),
        Mode::Train => {
            let mut r = pass.stream("zoneout");
            let n = g.value(prev).len();
            let mask = (0..n).map(|_| if r.random::<f64>() < p { T::one() } else { T::zero() }).collect();
            Ok(g.zoneout_mask(prev, new, mask)?)
        }
    }
}

/// One cell update from the input pre-activation `x·W_x + b` (`[B, 4h]`).
fn lstm_cell<T: Real>(g: &mut Graph<T>, p: &LstmParams, pre_x: Var, h: Var, c: Var, zoneout_p: f64, pass: &Pass) -> Result<(Var, Var)> {
    let rec = g.matmul(h, p.w_h)?;
    let pre = g.add(pre_x, rec)?;
    let acts = g.lstm_gates(pre)?;
    let c_new = g.lstm_cell_state(acts, c)?;
    let h_new = g.lstm_output(acts, c_new)?;
    let c2 = zoneout(g, c, c_new, zoneout_p, pass)?;
    let h2 = zoneout(g, h, h_new, zoneout_p, pass)?;
    Ok((h2, c2))
}

/// Single LSTM step on a batch of inputs `x` `[B, in]`; returns `(h', c')`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_step<T: Real>(g: &mut Graph<T>, p: &LstmParams, x: Var, h: Var, c: Var, zoneout_p: f64, pass: &Pass) -> Result<(Var, Var)> {
    check_zoneout(zoneout_p)?;
    let xs = g.shape(x).to_vec();
    if xs.len() != 2 || xs[1] != p.input || g.shape(h) != [xs[0], p.hidden] || g.shape(c) != [xs[0], p.hidden] {
        return Err(Error::Invalid(format!(
            "lstm_step: x {xs:?}, h {:?}, c {:?} for input {} hidden {}",
            g.shape(h),
            g.shape(c),
            p.input,
            p.hidden
        )));
    }
    let px = g.matmul(x, p.w_x)?;
    let pre_x = g.add(px, p.b)?;
    lstm_cell(g, p, pre_x, h, c, zoneout_p, pass)
}

fn zeros<T: Real>(g: &mut Graph<T>, rows: usize, cols: usize) -> Var {
    g.constant(Tensor::zeros(&[rows, cols]))
}

/// Unidirectional LSTM over a time-major sequence `[T*B, in]`; returns `[T*B, h]`.
pub fn lstm_sequence<T: Real>(g: &mut Graph<T>, p: &LstmParams, x: Var, batch: usize, zoneout_p: f64, pass: &Pass) -> Result<Var> {
    check_zoneout(zoneout_p)?;
    let rows = g.shape(x)[0];
    if batch == 0 || rows == 0 || !rows.is_multiple_of(batch) {
        return Err(Error::Invalid(format!("lstm_sequence: {rows} rows for batch {batch}")));
    }
    let px = g.matmul(x, p.w_x)?;
    let pre = g.add(px, p.b)?;
    let (mut h, mut c) = (zeros(g, batch, p.hidden), zeros(g, batch, p.hidden));
    let mut outs = Vec::with_capacity(rows / batch);
    for t in 0..rows / batch {
        let pre_t = g.slice(pre, 0, t * batch, (t + 1) * batch)?;
        (h, c) = lstm_cell(g, p, pre_t, h, c, zoneout_p, pass)?;
        outs.push(h);
    }
    Ok(g.concat(&outs, 0)?)
}

/// Row permutation of a time-major batch that reverses each sequence within
/// its own length; padded rows stay in place. It is an involution.
pub fn reverse_index(lengths: &[usize], seq: usize) -> Vec<usize> {
    let b = lengths.len();
    let mut idx = Vec::with_capacity(seq * b);
    for t in 0..seq {
        for (j, &len) in lengths.iter().enumerate() {
            idx.push(if t < len { (len - 1 - t) * b + j } else { t * b + j });
        }
    }
    idx
}

/// Time-major row `t*B + b` → batch-major row `b*T + t` (use as gather indices).
pub fn to_batch_major(batch: usize, seq: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| (0..seq).map(move |t| t * batch + b)).collect()
}

/// Batch-major row `b*T + t` → time-major row `t*B + b`.
pub fn to_time_major(batch: usize, seq: usize) -> Vec<usize> {
    (0..seq).flat_map(|t| (0..batch).map(move |b| b * seq + t)).collect()
}

/// Bidirectional layer over a padded time-major batch; the backward direction
/// starts at each sequence's own last frame. Returns `[T*B, 2h]`.
#[allow(clippy::too_many_arguments)]
pub fn blstm_layer<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    lengths: &[usize],
    fwd: &LstmParams,
    bwd: &LstmParams,
    zoneout_p: f64,
    pass: &Pass,
) -> Result<Var> {
    let batch = lengths.len();
    let rows = g.shape(x)[0];
    if batch == 0 || rows == 0 || lengths.contains(&0) {
        return Err(Error::Invalid("blstm_layer: empty sequence".into()));
    }
    let seq = rows / batch;
    if seq * batch != rows || lengths.iter().any(|&l| l > seq) {
        return Err(Error::Invalid(format!("blstm_layer: {rows} rows do not fit lengths {lengths:?}")));
    }
    let f = lstm_sequence(g, fwd, x, batch, zoneout_p, pass)?;
    let rev = reverse_index(lengths, seq);
    let xr = g.gather_rows(x, &rev)?;
    let br = lstm_sequence(g, bwd, xr, batch, zoneout_p, pass)?;
    let b = g.gather_rows(br, &rev)?;
    Ok(g.concat(&[f, b], 1)?)
}

// ------------------------------------------------------------------ attention

/// Output of one attention read.
#[derive(Debug, Clone, Copy)]
pub struct AttentionResult {
    /// `[B, width]`.
    pub context: Var,
    /// `[B*H, T]` probabilities (row `b*H + h`).
    pub weights: Var,
}

/// Memory-side quantities computed once per sequence.
#[derive(Debug, Clone)]
pub struct AttentionMemory {
    prefix: String,
    keys: Var,
    values: Var,
    mask: Option<Var>,
    batch: usize,
    seq: usize,
    heads: usize,
    multihead: bool,
}

impl AttentionMemory {
    pub fn seq(&self) -> usize {
        self.seq
    }
}

/// Additive-score mask `[B*H, T]` for padded frames.
fn score_mask<T: Real>(g: &mut Graph<T>, lengths: &[usize], heads: usize, seq: usize) -> Option<Var> {
    if lengths.iter().all(|&l| l == seq) {
        return None;
    }
    let mut m = Vec::with_capacity(lengths.len() * heads * seq);
    for &len in lengths {
        for _ in 0..heads {
            m.extend((0..seq).map(|t| if t < len { T::zero() } else { T::lit(MASK_BIAS) }));
        }
    }
    Some(g.constant(Tensor::new(vec![lengths.len() * heads, seq], m).expect("mask shape")))
}

fn check_memory<T: Real>(g: &Graph<T>, memory: Var, lengths: &[usize]) -> Result<(usize, usize)> {
    let batch = lengths.len();
    let rows = g.shape(memory)[0];
    if batch == 0 || rows == 0 || lengths.contains(&0) {
        return Err(Error::Invalid("attention over an empty memory".into()));
    }
    let seq = rows / batch;
    if seq * batch != rows || lengths.iter().any(|&l| l > seq) {
        return Err(Error::Invalid(format!("attention memory of {rows} rows does not fit lengths {lengths:?}")));
    }
    Ok((batch, seq))
}

/// Single-head additive attention memory; the context is read from the raw
/// memory. `memory` is batch-major `[B*T, d]`.
pub fn additive_memory<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    memory: Var,
    lengths: &[usize],
) -> Result<AttentionMemory> {
    let (batch, seq) = check_memory(g, memory, lengths)?;
    let wk = param(g, p, &format!("{prefix}.Wk"))?;
    let keys = g.matmul(memory, wk)?;
    let mask = score_mask(g, lengths, 1, seq);
    Ok(AttentionMemory { prefix: prefix.into(), keys, values: memory, mask, batch, seq, heads: 1, multihead: false })
}

/// Multi-head additive attention memory: per-head query/key/value projections
/// stored as column blocks of `Wq`, `Wk`, `Wv`, mixed by `Wo` after concatenation.
pub fn multihead_memory<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    memory: Var,
    lengths: &[usize],
    heads: usize,
) -> Result<AttentionMemory> {
    let (batch, seq) = check_memory(g, memory, lengths)?;
    let d = g.shape(memory)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Invalid(format!("memory width {d} not divisible by {heads} heads")));
    }
    let wk = param(g, p, &format!("{prefix}.Wk"))?;
    let wv = param(g, p, &format!("{prefix}.Wv"))?;
    let keys = g.matmul(memory, wk)?;
    let values = g.matmul(memory, wv)?;
    let mask = score_mask(g, lengths, heads, seq);
    Ok(AttentionMemory { prefix: prefix.into(), keys, values, mask, batch, seq, heads, multihead: true })
}

/// Reads `mem` with `query` `[B, q]`. Dropout on the probabilities is applied
/// in train mode without renormalization.
pub fn attend<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    mem: &AttentionMemory,
    query: Var,
    dropout_p: f64,
    pass: &Pass,
) -> Result<AttentionResult> {
    if g.shape(query)[0] != mem.batch {
        return Err(Error::Invalid(format!("query batch {} vs memory batch {}", g.shape(query)[0], mem.batch)));
    }
    let wq = param(g, p, &format!("{}.Wq", mem.prefix))?;
    let v = param(g, p, &format!("{}.v", mem.prefix))?;
    let q = g.matmul(query, wq)?;
    let mut scores = g.additive_scores(mem.keys, q, v, mem.heads, mem.seq)?;
    if let Some(m) = mem.mask {
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax(scores)?;
    let used = dropout(g, weights, dropout_p, pass)?;
    let mut context = g.attend(used, mem.values, mem.heads, mem.seq)?;
    if mem.multihead {
        let wo = param(g, p, &format!("{}.Wo", mem.prefix))?;
        context = g.matmul(context, wo)?;
    }
    Ok(AttentionResult { context, weights })
}

/// Unbatched single-head convenience: `memory` `[T, d]`, `query` `[1, q]`.
pub fn additive_attention<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    query: Var,
    memory: Var,
    dropout_p: f64,
    pass: &Pass,
) -> Result<AttentionResult> {
    let t = g.shape(memory)[0];
    let mem = additive_memory(g, p, prefix, memory, &[t])?;
    attend(g, p, &mem, query, dropout_p, pass)
}

/// Unbatched multi-head convenience.
#[allow(clippy::too_many_arguments)]
pub fn multihead_additive_attention<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    query: Var,
    memory: Var,
    heads: usize,
    dropout_p: f64,
    pass: &Pass,
) -> Result<AttentionResult> {
    let t = g.shape(memory)[0];
    let mem = multihead_memory(g, p, prefix, memory, &[t], heads)?;
    attend(g, p, &mem, query, dropout_p, pass)
}

// ------------------------------------------------------------------ pre-net / post-net

/// Two relu layers with dropout between them (train mode, or always when
/// `dropout_always`). Works on any `[N, in]` batch of frames.
pub fn prenet<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    x: Var,
    dropout_p: f64,
    dropout_always: bool,
    pass: &Pass,
) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.relu(h)?;
    let h = if (pass.is_train() || dropout_always) && dropout_p > 0.0 {
        g.dropout(h, dropout_p, Some(&mut pass.stream("dropout")))?
    } else {
        h
    };
    let h = linear(g, p, &format!("{prefix}.fc2"), h)?;
    Ok(g.relu(h)?)
}

/// Residual stack of 1-D convolutions over time on a batch-major `[B*T, bins]`
/// spectrogram: tanh on every layer but the last, which maps back to `bins`.
#[allow(clippy::too_many_arguments)]
pub fn postnet<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    x: Var,
    batch: usize,
    seq: usize,
    layers: usize,
    kernel: usize,
) -> Result<Var> {
    let mut h = x;
    for l in 0..layers {
        let cols = g.im2col(h, batch, seq, kernel)?;
        h = linear(g, p, &format!("{prefix}.conv{l}"), cols)?;
        if l + 1 < layers {
            h = g.tanh(h)?;
        }
    }
    Ok(g.add(x, h)?)
}

impl<T: Real> Init<'_, T> {
    pub fn prenet(&mut self, prefix: &str, input: usize, units: usize) -> Result<()> {
        self.linear(&format!("{prefix}.fc1"), input, units)?;
        self.linear(&format!("{prefix}.fc2"), units, units)
    }

    pub fn postnet(&mut self, prefix: &str, bins: usize, channels: usize, layers: usize, kernel: usize) -> Result<()> {
        for l in 0..layers {
            let cin = if l == 0 { bins } else { channels };
            let cout = if l + 1 == layers { bins } else { channels };
            self.linear(&format!("{prefix}.conv{l}"), kernel * cin, cout)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn zero_lstm_is_zero() {
        let s = store_with(&[("l.W", Tensor::zeros(&[5, 12])), ("l.b", Tensor::zeros(&[12]))]);
        let mut g = Graph::inference();
        let p = LstmParams::load(&mut g, &s, "l").unwrap();
        assert_eq!((p.input, p.hidden), (2, 3));
        let x = g.constant(Tensor::from_f64(&[1, 2], &[0.3, -0.7]).unwrap());
        let h = g.constant(Tensor::from_f64(&[1, 3], &[0.1, 0.2, 0.3]).unwrap());
        let c = g.constant(Tensor::zeros(&[1, 3]));
        let (h2, c2) = lstm_step(&mut g, &p, x, h, c, 0.0, &Pass::infer()).unwrap();
        assert!(g.value(h2).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c2).data().iter().all(|&v| v == 0.0));
        assert!(lstm_step(&mut g, &p, x, h, c, 1.5, &Pass::infer()).is_err());
        assert!(lstm_step(&mut g, &p, h, h, c, 0.0, &Pass::infer()).is_err());
    }

    #[test]
    fn reverse_index_is_involution() {
        let idx = reverse_index(&[3, 1, 2], 3);
        assert_eq!(idx, vec![6, 1, 5, 3, 4, 2, 0, 7, 8]);
        let twice: Vec<usize> = idx.iter().map(|&i| idx[i]).collect();
        assert_eq!(twice, (0..9).collect::<Vec<_>>());
        let bm = to_batch_major(2, 3);
        let tm = to_time_major(2, 3);
        assert_eq!(bm.iter().map(|&i| tm[i]).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    }
}
