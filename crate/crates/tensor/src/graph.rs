//! The recording graph: every forward op appends a node holding its value and
//! whatever the reverse pass needs, and `backward` walks the nodes once in reverse.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::broadcast::{broadcast_shape, IndexMap};
use crate::error::{shape_err, Result, TensorError};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// How zoneout mixes the previous and the candidate state.
#[derive(Debug, Clone)]
pub(crate) enum ZoneMix<T> {
    /// Per-unit keep mask; 1 keeps the previous value.
    Mask(Vec<T>),
    /// Expectation: `p * prev + (1 - p) * new`.
    Expect(T),
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Constant,
    Param(String),
    Add(Var, Var, IndexMap, IndexMap),
    Sub(Var, Var, IndexMap, IndexMap),
    Mul(Var, Var, IndexMap, IndexMap),
    Scale(Var, T),
    MatMul(Var, Var),
    Concat(Vec<Var>, usize),
    Slice { a: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SquaredError { a: Var, b: Var, row_w: Option<Vec<T>>, norm: T },
    SigmoidCe { logits: Var, targets: Vec<T>, w: Option<Vec<T>>, norm: T },
    SoftmaxCe { logits: Var, probs: Vec<T>, classes: Vec<usize>, w: Option<Vec<T>>, norm: T },
    Dropout(Var, Vec<T>),
    Broadcast(Var, IndexMap),
    LstmGates(Var),
    LstmCellState(Var, Var),
    LstmOutput(Var, Var),
    Zoneout(Var, Var, ZoneMix<T>),
    AdditiveScores { keys: Var, query: Var, v: Var, heads: usize, seq: usize, th: Vec<T> },
    Attend { weights: Var, values: Var, heads: usize, seq: usize },
    GatherRows(Var, Vec<usize>),
    Im2Col { a: Var, batch: usize, seq: usize, kernel: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: String, g: Tensor<T>) {
        self.map.insert(name, g);
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.map
    }

    /// Adds `other` into `self`, name by name.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (k, g) in other.map {
            match self.map.get_mut(&k) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.map.insert(k, g);
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }
}

/// A single-use tape of forward operations.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    taping: bool,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records everything needed for `backward`.
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(1024), params: HashMap::new(), taping: true, consumed: false }
    }

    /// A graph for inference; `backward` is refused.
    pub fn inference() -> Self {
        Graph { taping: false, ..Self::new() }
    }

    pub fn is_taping(&self) -> bool {
        self.taping
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let op = if self.taping { op } else { Op::Constant };
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Constant });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named trainable leaf. Repeated calls with the same name return
    /// the same node, so each parameter owns one gradient slot.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        value.check_finite("param")?;
        self.nodes.push(Node { value: value.clone(), op: Op::Param(name.to_string()) });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Looks `name` up in `store` and registers it.
    pub fn param_from(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))?;
        self.param(name, t)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, IndexMap, IndexMap)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let ma = IndexMap::new(name, &sa, &out_shape)?;
        let mb = IndexMap::new(name, &sb, &out_shape)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let data: Vec<T> = match (&ma, &mb) {
            (IndexMap::Same, IndexMap::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            (IndexMap::Same, IndexMap::Modulo(m)) => {
                let mut out = Vec::with_capacity(n);
                for chunk in da.chunks(*m) {
                    out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            _ => (0..n).map(|i| f(da[ma.get(i)], db[mb.get(i)])).collect(),
        };
        Ok((Tensor::from_parts(out_shape, data), ma, mb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ma, mb) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b, ma, mb), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ma, mb) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b, ma, mb), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ma, mb) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b, ma, mb), "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), "scale")
    }

    fn unary(&mut self, a: Var, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Result<Var> {
        let t = self.value(a).map(f);
        self.push(t, op, name)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), "tanh", |x| x.fast_tanh())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| x.max(T::zero()))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), "exp", |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), "log", |x| x.ln())
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("rank-2 required, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(shape_err("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec(), axis), "concat")
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(shape_err("slice", format!("[{start}, {end}) on axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&d[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        self.push(Tensor::from_parts(shape, out), Op::Slice { a, axis, start }, "slice")
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let m = IndexMap::new("broadcast", self.shape(a), shape)?;
        let d = self.value(a).data();
        let n: usize = shape.iter().product();
        let out: Vec<T> = (0..n).map(|i| d[m.get(i)]).collect();
        self.push(Tensor::from_parts(shape.to_vec(), out), Op::Broadcast(a, m), "broadcast")
    }

    /// Rows of `a` (viewed as a matrix over its last axis) picked by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(a).as_matrix_dims();
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {rows}")));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            out.extend_from_slice(&d[r * cols..(r + 1) * cols]);
        }
        self.push(Tensor::from_parts(vec![idx.len(), cols], out), Op::GatherRows(a, idx.to_vec()), "gather_rows")
    }

    /// Unfolds a batch-major `[batch*seq, C]` sequence into `[batch*seq, kernel*C]`
    /// windows centred on each frame, zero-padded at every sequence boundary.
    pub fn im2col(&mut self, a: Var, batch: usize, seq: usize, kernel: usize) -> Result<Var> {
        let (rows, c) = self.value(a).as_matrix_dims();
        if rows != batch * seq || kernel == 0 {
            return Err(shape_err("im2col", format!("{rows} rows for batch {batch} x seq {seq}")));
        }
        let half = kernel / 2;
        let d = self.value(a).data();
        let mut out = vec![T::zero(); rows * kernel * c];
        for b in 0..batch {
            for t in 0..seq {
                let dst = (b * seq + t) * kernel * c;
                for k in 0..kernel {
                    let src_t = t as isize + k as isize - half as isize;
                    if src_t < 0 || src_t >= seq as isize {
                        continue;
                    }
                    let src = (b * seq + src_t as usize) * c;
                    out[dst + k * c..dst + (k + 1) * c].copy_from_slice(&d[src..src + c]);
                }
            }
        }
        self.push(Tensor::from_parts(vec![rows, kernel * c], out), Op::Im2Col { a, batch, seq, kernel }, "im2col")
    }

    // ---------------------------------------------------------------- reductions / softmax

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).as_matrix_dims();
        let d = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            softmax_row(&d[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), "softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.sum() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), "mean")
    }

    // ---------------------------------------------------------------- losses

    /// Mean squared error. With `row_weights`, rows of the last axis are weighted and
    /// the sum is normalised by `sum(w) * cols`.
    pub fn squared_error(&mut self, a: Var, b: Var, row_weights: Option<&[T]>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("squared_error", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (rows, cols) = self.value(a).as_matrix_dims();
        if let Some(w) = row_weights {
            if w.len() != rows {
                return Err(shape_err("squared_error", format!("{} weights for {rows} rows", w.len())));
            }
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut total = T::zero();
        let mut wsum = T::zero();
        for r in 0..rows {
            let w = row_weights.map_or(T::one(), |w| w[r]);
            if w == T::zero() {
                continue;
            }
            let s: T = (0..cols)
                .map(|c| {
                    let e = da[r * cols + c] - db[r * cols + c];
                    e * e
                })
                .sum();
            total = total + w * s;
            wsum = wsum + w;
        }
        let norm = (wsum * T::lit(cols as f64)).max(T::min_positive_value());
        let op = Op::SquaredError { a, b, row_w: row_weights.map(|w| w.to_vec()), norm };
        self.push(Tensor::scalar(total / norm), op, "squared_error")
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets` in [0, 1].
    pub fn sigmoid_cross_entropy(&mut self, logits: Var, targets: &[T], weights: Option<&[T]>) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n || weights.is_some_and(|w| w.len() != n) {
            return Err(shape_err("sigmoid_cross_entropy", format!("{n} logits vs {} targets", targets.len())));
        }
        let x = self.value(logits).data();
        let mut total = T::zero();
        let mut wsum = T::zero();
        for i in 0..n {
            let w = weights.map_or(T::one(), |w| w[i]);
            let l = x[i].max(T::zero()) - x[i] * targets[i] + (T::one() + (-x[i].abs()).exp()).ln();
            total = total + w * l;
            wsum = wsum + w;
        }
        let norm = wsum.max(T::min_positive_value());
        let op = Op::SigmoidCe { logits, targets: targets.to_vec(), w: weights.map(|w| w.to_vec()), norm };
        self.push(Tensor::scalar(total / norm), op, "sigmoid_cross_entropy")
    }

    /// Mean negative log-likelihood of `classes` under a row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, classes: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let (rows, cols) = self.value(logits).as_matrix_dims();
        if classes.len() != rows || weights.is_some_and(|w| w.len() != rows) {
            return Err(shape_err("softmax_cross_entropy", format!("{rows} rows vs {} targets", classes.len())));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= cols) {
            return Err(shape_err("softmax_cross_entropy", format!("class {bad} >= {cols}")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        let mut wsum = T::zero();
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            softmax_row(row, &mut probs[r * cols..(r + 1) * cols]);
            let w = weights.map_or(T::one(), |w| w[r]);
            if w == T::zero() {
                continue;
            }
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            total = total + w * (lse - row[classes[r]]);
            wsum = wsum + w;
        }
        let norm = wsum.max(T::min_positive_value());
        let op = Op::SoftmaxCe { logits, probs, classes: classes.to_vec(), w: weights.map(|w| w.to_vec()), norm };
        self.push(Tensor::scalar(total / norm), op, "softmax_cross_entropy")
    }

    // ---------------------------------------------------------------- stochastic

    /// Inverted dropout. `rng = None` (inference) or `rate = 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Ok(a),
        };
        let scale = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale }).collect();
        self.dropout_with_mask(a, mask)
    }

    /// Dropout with an explicit, pre-scaled mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(shape_err("dropout", "mask size"));
        }
        let d = self.value(a).data();
        let out: Vec<T> = d.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Dropout(a, mask), "dropout")
    }

    // ---------------------------------------------------------------- recurrent cells

    /// Gate activations for packed `[i, f, g, o]` pre-activations of shape `[B, 4h]`:
    /// sigmoid on i, f, o and tanh on g.
    pub fn lstm_gates(&mut self, pre: Var) -> Result<Var> {
        let (rows, cols) = self.value(pre).as_matrix_dims();
        if cols % 4 != 0 {
            return Err(shape_err("lstm_gates", format!("{cols} columns not divisible by 4")));
        }
        let h = cols / 4;
        let d = self.value(pre).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                let x = d[r * cols + j];
                out[r * cols + j] = if (2 * h..3 * h).contains(&j) { x.fast_tanh() } else { x.fast_sigmoid() };
            }
        }
        let shape = self.shape(pre).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::LstmGates(pre), "lstm_gates")
    }

    /// Candidate cell `f * c + i * g` from gate activations `[B, 4h]` and `c` `[B, h]`.
    pub fn lstm_cell_state(&mut self, acts: Var, c: Var) -> Result<Var> {
        let (rows, cols) = self.value(acts).as_matrix_dims();
        let h = cols / 4;
        if self.shape(c) != [rows, h] {
            return Err(shape_err("lstm_cell_state", format!("acts {:?} vs c {:?}", self.shape(acts), self.shape(c))));
        }
        let (a, cv) = (self.value(acts).data(), self.value(c).data());
        let mut out = vec![T::zero(); rows * h];
        for r in 0..rows {
            let g = &a[r * cols..(r + 1) * cols];
            for j in 0..h {
                out[r * h + j] = g[h + j] * cv[r * h + j] + g[j] * g[2 * h + j];
            }
        }
        self.push(Tensor::from_parts(vec![rows, h], out), Op::LstmCellState(acts, c), "lstm_cell_state")
    }

    /// Candidate hidden state `o * tanh(c)`.
    pub fn lstm_output(&mut self, acts: Var, c: Var) -> Result<Var> {
        let (rows, cols) = self.value(acts).as_matrix_dims();
        let h = cols / 4;
        if self.shape(c) != [rows, h] {
            return Err(shape_err("lstm_output", format!("acts {:?} vs c {:?}", self.shape(acts), self.shape(c))));
        }
        let (a, cv) = (self.value(acts).data(), self.value(c).data());
        let mut out = vec![T::zero(); rows * h];
        for r in 0..rows {
            for j in 0..h {
                out[r * h + j] = a[r * cols + 3 * h + j] * cv[r * h + j].fast_tanh();
            }
        }
        self.push(Tensor::from_parts(vec![rows, h], out), Op::LstmOutput(acts, c), "lstm_output")
    }

    /// Zoneout with an explicit keep mask (1 keeps `prev`).
    pub fn zoneout_mask(&mut self, prev: Var, new: Var, mask: Vec<T>) -> Result<Var> {
        if self.shape(prev) != self.shape(new) || mask.len() != self.value(new).len() {
            return Err(shape_err("zoneout", "state/mask shapes differ"));
        }
        let (p, n) = (self.value(prev).data(), self.value(new).data());
        let out: Vec<T> = (0..n.len()).map(|i| mask[i] * p[i] + (T::one() - mask[i]) * n[i]).collect();
        let shape = self.shape(new).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Zoneout(prev, new, ZoneMix::Mask(mask)), "zoneout")
    }

    /// Zoneout in expectation: `p * prev + (1 - p) * new`.
    pub fn zoneout_expect(&mut self, prev: Var, new: Var, p: T) -> Result<Var> {
        if self.shape(prev) != self.shape(new) {
            return Err(shape_err("zoneout", "state shapes differ"));
        }
        let (a, b) = (self.value(prev).data(), self.value(new).data());
        let out: Vec<T> = a.iter().zip(b).map(|(&x, &y)| p * x + (T::one() - p) * y).collect();
        let shape = self.shape(new).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Zoneout(prev, new, ZoneMix::Expect(p)), "zoneout")
    }

    // ---------------------------------------------------------------- attention

    /// Additive (tanh) attention energies.
    ///
    /// `keys` is batch-major `[B*T, H*a]`, `query` is `[B, H*a]` and `v` is `[H*a]`.
    /// Returns `[B*H, T]` with `e[b,h,t] = sum_j v[h,j] * tanh(keys[b,t,h,j] + query[b,h,j])`.
    pub fn additive_scores(&mut self, keys: Var, query: Var, v: Var, heads: usize, seq: usize) -> Result<Var> {
        let (krows, kcols) = self.value(keys).as_matrix_dims();
        let (batch, qcols) = self.value(query).as_matrix_dims();
        if heads == 0 || kcols % heads != 0 || qcols != kcols || krows != batch * seq || self.value(v).len() != kcols {
            return Err(shape_err(
                "additive_scores",
                format!("keys {:?}, query {:?}, v {:?}, heads {heads}, seq {seq}", self.shape(keys), self.shape(query), self.shape(v)),
            ));
        }
        let a = kcols / heads;
        let (kd, qd, vd) = (self.value(keys).data(), self.value(query).data(), self.value(v).data());
        let mut th = vec![T::zero(); krows * kcols];
        let mut out = vec![T::zero(); batch * heads * seq];
        for b in 0..batch {
            let q = &qd[b * kcols..(b + 1) * kcols];
            for t in 0..seq {
                let row = (b * seq + t) * kcols;
                for h in 0..heads {
                    let mut e = T::zero();
                    for j in h * a..(h + 1) * a {
                        let x = (kd[row + j] + q[j]).fast_tanh();
                        th[row + j] = x;
                        e = e + vd[j] * x;
                    }
                    out[(b * heads + h) * seq + t] = e;
                }
            }
        }
        let th = if self.taping { th } else { Vec::new() };
        self.push(
            Tensor::from_parts(vec![batch * heads, seq], out),
            Op::AdditiveScores { keys, query, v, heads, seq, th },
            "additive_scores",
        )
    }

    /// Per-head weighted sum of values: `weights` `[B*H, T]`, `values` `[B*T, H*d]`,
    /// result `[B, H*d]` where head `h` reads its own column block.
    pub fn attend(&mut self, weights: Var, values: Var, heads: usize, seq: usize) -> Result<Var> {
        let (wrows, wcols) = self.value(weights).as_matrix_dims();
        let (vrows, vcols) = self.value(values).as_matrix_dims();
        if heads == 0 || wcols != seq || wrows % heads != 0 || vrows != (wrows / heads) * seq || vcols % heads != 0 {
            return Err(shape_err(
                "attend",
                format!("weights {:?}, values {:?}, heads {heads}, seq {seq}", self.shape(weights), self.shape(values)),
            ));
        }
        let batch = wrows / heads;
        let dh = vcols / heads;
        let (wd, vd) = (self.value(weights).data(), self.value(values).data());
        let mut out = vec![T::zero(); batch * vcols];
        for b in 0..batch {
            for h in 0..heads {
                let w = &wd[(b * heads + h) * seq..(b * heads + h + 1) * seq];
                let o = &mut out[b * vcols + h * dh..b * vcols + (h + 1) * dh];
                for (t, &wt) in w.iter().enumerate() {
                    if wt == T::zero() {
                        continue;
                    }
                    let row = &vd[(b * seq + t) * vcols + h * dh..(b * seq + t) * vcols + (h + 1) * dh];
                    for (x, &y) in o.iter_mut().zip(row) {
                        *x = *x + wt * y;
                    }
                }
            }
        }
        self.push(Tensor::from_parts(vec![batch, vcols], out), Op::Attend { weights, values, heads, seq }, "attend")
    }

    // ---------------------------------------------------------------- reverse pass

    /// Reverse-mode sweep from the scalar `loss`. Returns a gradient for every
    /// parameter registered on this graph; parameters the loss does not depend on
    /// get zero tensors. The graph cannot be replayed afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.taping {
            return Err(TensorError::TapingDisabled);
        }
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param(name) = &self.nodes[i].op {
                out.insert(name.clone(), g);
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        for (name, &v) in &self.params {
            if out.get(name).is_none() {
                out.insert(name.clone(), Tensor::zeros(self.shape(v)));
            }
        }
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b, ma, mb) => {
                acc_mapped(grads, self, *a, ma, gd, |x, _| x);
                acc_mapped(grads, self, *b, mb, gd, |x, _| x);
            }
            Op::Sub(a, b, ma, mb) => {
                acc_mapped(grads, self, *a, ma, gd, |x, _| x);
                acc_mapped(grads, self, *b, mb, gd, |x, _| -x);
            }
            Op::Mul(a, b, ma, mb) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                acc_mapped(grads, self, *a, ma, gd, |x, k| x * db[mb.get(k)]);
                acc_mapped(grads, self, *b, mb, gd, |x, k| x * da[ma.get(k)]);
            }
            Op::Scale(a, c) => acc_with(grads, self, *a, |dst| {
                for (d, &x) in dst.iter_mut().zip(gd) {
                    *d = *d + x * *c;
                }
            }),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                // dA = dC · Bᵀ
                acc_with(grads, self, *a, |dst| {
                    T::gemm(m, n, k, T::one(), gd, n as isize, 1, bv, 1, n as isize, T::one(), dst, k as isize, 1)
                });
                // dB = Aᵀ · dC
                acc_with(grads, self, *b, |dst| {
                    T::gemm(k, m, n, T::one(), av, 1, k as isize, gd, n as isize, 1, T::one(), dst, n as isize, 1)
                });
            }
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    acc_with(grads, self, p, |dst| {
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + len];
                            for (d, &x) in dst[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d = *d + x;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let s = self.shape(*a).to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let width = out.shape()[*axis] * inner;
                acc_with(grads, self, *a, |dst| {
                    for o in 0..outer {
                        let base = o * s[*axis] * inner + start * inner;
                        for (d, &x) in dst[base..base + width].iter_mut().zip(&gd[o * width..(o + 1) * width]) {
                            *d = *d + x;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc_with(grads, self, *a, |dst| {
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] = dst[i * c + j] + gd[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc_with(grads, self, *a, |dst| add_into(dst, gd)),
            Op::Sigmoid(a) => {
                let y = out.data();
                acc_with(grads, self, *a, |dst| {
                    for k in 0..dst.len() {
                        dst[k] = dst[k] + gd[k] * y[k] * (T::one() - y[k]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                acc_with(grads, self, *a, |dst| {
                    for k in 0..dst.len() {
                        dst[k] = dst[k] + gd[k] * (T::one() - y[k] * y[k]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc_with(grads, self, *a, |dst| {
                    for k in 0..dst.len() {
                        if x[k] > T::zero() {
                            dst[k] = dst[k] + gd[k];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                acc_with(grads, self, *a, |dst| {
                    for k in 0..dst.len() {
                        dst[k] = dst[k] + gd[k] * y[k];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc_with(grads, self, *a, |dst| {
                    for k in 0..dst.len() {
                        dst[k] = dst[k] + gd[k] / x[k];
                    }
                });
            }
            Op::Softmax(a) => {
                let (rows, cols) = out.as_matrix_dims();
                let y = out.data();
                acc_with(grads, self, *a, |dst| {
                    for r in 0..rows {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &gd[r * cols..(r + 1) * cols]);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for c in 0..cols {
                            dst[r * cols + c] = dst[r * cols + c] + yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                acc_with(grads, self, *a, |dst| dst.iter_mut().for_each(|d| *d = *d + s));
            }
            Op::Mean(a) => {
                let s = gd[0] / T::lit(self.value(*a).len() as f64);
                acc_with(grads, self, *a, |dst| dst.iter_mut().for_each(|d| *d = *d + s));
            }
            Op::SquaredError { a, b, row_w, norm } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let (_, cols) = self.value(*a).as_matrix_dims();
                let scale = gd[0] * T::lit(2.0) / *norm;
                let coef = |k: usize| row_w.as_ref().map_or(T::one(), |w| w[k / cols]) * scale;
                acc_with(grads, self, *a, |dst| {
                    for k in 0..dst.len() {
                        dst[k] = dst[k] + coef(k) * (da[k] - db[k]);
                    }
                });
                acc_with(grads, self, *b, |dst| {
                    for k in 0..dst.len() {
                        dst[k] = dst[k] - coef(k) * (da[k] - db[k]);
                    }
                });
            }
            Op::SigmoidCe { logits, targets, w, norm } => {
                let x = self.value(*logits).data();
                let scale = gd[0] / *norm;
                acc_with(grads, self, *logits, |dst| {
                    for k in 0..dst.len() {
                        let wk = w.as_ref().map_or(T::one(), |w| w[k]);
                        dst[k] = dst[k] + scale * wk * (sigmoid(x[k]) - targets[k]);
                    }
                });
            }
            Op::SoftmaxCe { logits, probs, classes, w, norm } => {
                let (rows, cols) = self.value(*logits).as_matrix_dims();
                let scale = gd[0] / *norm;
                acc_with(grads, self, *logits, |dst| {
                    for r in 0..rows {
                        let wr = w.as_ref().map_or(T::one(), |w| w[r]) * scale;
                        if wr == T::zero() {
                            continue;
                        }
                        for c in 0..cols {
                            let y = if c == classes[r] { T::one() } else { T::zero() };
                            dst[r * cols + c] = dst[r * cols + c] + wr * (probs[r * cols + c] - y);
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => acc_with(grads, self, *a, |dst| {
                for k in 0..dst.len() {
                    dst[k] = dst[k] + gd[k] * mask[k];
                }
            }),
            Op::Broadcast(a, m) => acc_mapped(grads, self, *a, m, gd, |x, _| x),
            Op::LstmGates(pre) => {
                let (_, cols) = out.as_matrix_dims();
                let h = cols / 4;
                let y = out.data();
                acc_with(grads, self, *pre, |dst| {
                    for k in 0..dst.len() {
                        let j = k % cols;
                        let d = if (2 * h..3 * h).contains(&j) { T::one() - y[k] * y[k] } else { y[k] * (T::one() - y[k]) };
                        dst[k] = dst[k] + gd[k] * d;
                    }
                });
            }
            Op::LstmCellState(acts, c) => {
                let (rows, cols) = self.value(*acts).as_matrix_dims();
                let h = cols / 4;
                let (a, cv) = (self.value(*acts).data(), self.value(*c).data());
                acc_with(grads, self, *acts, |dst| {
                    for r in 0..rows {
                        for j in 0..h {
                            let gc = gd[r * h + j];
                            let base = r * cols;
                            dst[base + j] = dst[base + j] + gc * a[base + 2 * h + j];
                            dst[base + h + j] = dst[base + h + j] + gc * cv[r * h + j];
                            dst[base + 2 * h + j] = dst[base + 2 * h + j] + gc * a[base + j];
                        }
                    }
                });
                acc_with(grads, self, *c, |dst| {
                    for r in 0..rows {
                        for j in 0..h {
                            dst[r * h + j] = dst[r * h + j] + gd[r * h + j] * a[r * cols + h + j];
                        }
                    }
                });
            }
            Op::LstmOutput(acts, c) => {
                let (rows, cols) = self.value(*acts).as_matrix_dims();
                let h = cols / 4;
                let (a, cv) = (self.value(*acts).data(), self.value(*c).data());
                acc_with(grads, self, *acts, |dst| {
                    for r in 0..rows {
                        for j in 0..h {
                            let k = r * cols + 3 * h + j;
                            dst[k] = dst[k] + gd[r * h + j] * cv[r * h + j].fast_tanh();
                        }
                    }
                });
                acc_with(grads, self, *c, |dst| {
                    for r in 0..rows {
                        for j in 0..h {
                            let t = cv[r * h + j].fast_tanh();
                            dst[r * h + j] = dst[r * h + j] + gd[r * h + j] * a[r * cols + 3 * h + j] * (T::one() - t * t);
                        }
                    }
                });
            }
            Op::Zoneout(prev, new, mix) => {
                let keep = |k: usize| match mix {
                    ZoneMix::Mask(m) => m[k],
                    ZoneMix::Expect(p) => *p,
                };
                acc_with(grads, self, *prev, |dst| {
                    for k in 0..dst.len() {
                        dst[k] = dst[k] + gd[k] * keep(k);
                    }
                });
                acc_with(grads, self, *new, |dst| {
                    for k in 0..dst.len() {
                        dst[k] = dst[k] + gd[k] * (T::one() - keep(k));
                    }
                });
            }
            Op::AdditiveScores { keys, query, v, heads, seq, th } => {
                let (krows, kcols) = self.value(*keys).as_matrix_dims();
                let batch = krows / seq;
                let a = kcols / heads;
                let vd = self.value(*v).data();
                let mut dk = vec![T::zero(); krows * kcols];
                let mut dq = vec![T::zero(); batch * kcols];
                let mut dv = vec![T::zero(); kcols];
                for b in 0..batch {
                    for t in 0..*seq {
                        let row = (b * seq + t) * kcols;
                        for h in 0..*heads {
                            let ge = gd[(b * heads + h) * seq + t];
                            if ge == T::zero() {
                                continue;
                            }
                            for j in h * a..(h + 1) * a {
                                let x = th[row + j];
                                dv[j] = dv[j] + ge * x;
                                let dpre = ge * vd[j] * (T::one() - x * x);
                                dk[row + j] = dk[row + j] + dpre;
                                dq[b * kcols + j] = dq[b * kcols + j] + dpre;
                            }
                        }
                    }
                }
                acc_with(grads, self, *keys, |dst| add_into(dst, &dk));
                acc_with(grads, self, *query, |dst| add_into(dst, &dq));
                acc_with(grads, self, *v, |dst| add_into(dst, &dv));
            }
            Op::Attend { weights, values, heads, seq } => {
                let (wrows, _) = self.value(*weights).as_matrix_dims();
                let (_, vcols) = self.value(*values).as_matrix_dims();
                let batch = wrows / heads;
                let dh = vcols / heads;
                let (wd, vd) = (self.value(*weights).data(), self.value(*values).data());
                acc_with(grads, self, *weights, |dst| {
                    for b in 0..batch {
                        for h in 0..*heads {
                            let go = &gd[b * vcols + h * dh..b * vcols + (h + 1) * dh];
                            for t in 0..*seq {
                                let row = &vd[(b * seq + t) * vcols + h * dh..(b * seq + t) * vcols + (h + 1) * dh];
                                let dot: T = go.iter().zip(row).map(|(&x, &y)| x * y).sum();
                                let k = (b * heads + h) * seq + t;
                                dst[k] = dst[k] + dot;
                            }
                        }
                    }
                });
                acc_with(grads, self, *values, |dst| {
                    for b in 0..batch {
                        for h in 0..*heads {
                            let go = &gd[b * vcols + h * dh..b * vcols + (h + 1) * dh];
                            for t in 0..*seq {
                                let wt = wd[(b * heads + h) * seq + t];
                                if wt == T::zero() {
                                    continue;
                                }
                                let base = (b * seq + t) * vcols + h * dh;
                                for (d, &x) in dst[base..base + dh].iter_mut().zip(go) {
                                    *d = *d + wt * x;
                                }
                            }
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let cols = out.as_matrix_dims().1;
                acc_with(grads, self, *a, |dst| {
                    for (i, &r) in idx.iter().enumerate() {
                        for (d, &x) in dst[r * cols..(r + 1) * cols].iter_mut().zip(&gd[i * cols..(i + 1) * cols]) {
                            *d = *d + x;
                        }
                    }
                });
            }
            Op::Im2Col { a, batch, seq, kernel } => {
                let c = self.value(*a).as_matrix_dims().1;
                let half = kernel / 2;
                acc_with(grads, self, *a, |dst| {
                    for b in 0..*batch {
                        for t in 0..*seq {
                            let src = (b * seq + t) * kernel * c;
                            for k in 0..*kernel {
                                let tt = t as isize + k as isize - half as isize;
                                if tt < 0 || tt >= *seq as isize {
                                    continue;
                                }
                                let d0 = (b * seq + tt as usize) * c;
                                for (d, &x) in dst[d0..d0 + c].iter_mut().zip(&gd[src + k * c..src + (k + 1) * c]) {
                                    *d = *d + x;
                                }
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let mx = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mx).exp();
        s = s + *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Runs `f` on the (lazily zeroed) gradient buffer of `v`, skipping constants.
fn acc_with<T: Real>(grads: &mut [Option<Tensor<T>>], g: &Graph<T>, v: Var, f: impl FnOnce(&mut [T])) {
    if matches!(g.nodes[v.0].op, Op::Constant) {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(g.shape(v)));
    f(slot.data_mut());
}

/// Accumulates `f(grad_out[k], k)` into `v`'s gradient at the broadcast-mapped index.
fn acc_mapped<T: Real>(grads: &mut [Option<Tensor<T>>], g: &Graph<T>, v: Var, map: &IndexMap, gd: &[T], f: impl Fn(T, usize) -> T) {
    acc_with(grads, g, v, |dst| match map {
        IndexMap::Same => {
            for k in 0..gd.len() {
                dst[k] = dst[k] + f(gd[k], k);
            }
        }
        _ => {
            for (k, &gk) in gd.iter().enumerate() {
                let j = map.get(k);
                dst[j] = dst[j] + f(gk, k);
            }
        }
    });
}
