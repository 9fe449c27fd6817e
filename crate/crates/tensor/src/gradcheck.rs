//! Central finite-difference checks of analytic gradients (64-bit only).

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::kind::{forward_op, OpAttrs, OpKind};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between the backward-pass gradient of `f` and central
/// differences, over every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(TensorError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    let mut g = Graph::new();
    let vars = inputs.iter().zip(&names).map(|(t, n)| g.param(n, t)).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (i, name) in names.iter().enumerate() {
        let analytic = grads.get(name).expect("every input is registered");
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + eps;
            let up = eval(&work)?;
            work[i].data_mut()[k] = x0 - eps;
            let down = eval(&work)?;
            work[i].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Like [`check_gradients`] but over a parameter store, using a five-point
/// stencil. At most `per_tensor` elements (picked by `seed`) of each parameter
/// are perturbed.
pub fn check_param_gradients<F>(store: &ParamStore<f64>, eps: f64, per_tensor: Option<usize>, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    Ok(param_gradient_report(store, eps, per_tensor, seed, f)?.into_iter().fold(0.0, |m, (_, e)| m.max(e)))
}

/// Per-parameter worst relative error.
pub fn param_gradient_report<F>(store: &ParamStore<f64>, eps: f64, per_tensor: Option<usize>, seed: u64, f: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(TensorError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };
    let mut work = store.clone();
    let mut report = Vec::new();
    for (ti, (name, t)) in store.iter().enumerate() {
        let Some(analytic) = grads.get(name) else { continue };
        let n = t.len();
        let picks: Vec<usize> = match per_tensor {
            Some(m) if m < n => {
                let mut r = rng::stream(seed, "gradcheck.pick", ti as u64, 0);
                (0..m).map(|_| r.random_range(0..n)).collect()
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for k in picks {
            let x0 = t.data()[k];
            let mut at = |dx: f64| -> Result<f64> {
                work.get_mut(name).expect("cloned store").data_mut()[k] = x0 + dx;
                eval(&work)
            };
            // Fourth-order stencil: truncation error O(eps^4).
            let numeric = (at(-2.0 * eps)? - 8.0 * at(-eps)? + 8.0 * at(eps)? - at(2.0 * eps)?) / (12.0 * eps);
            work.get_mut(name).expect("cloned store").data_mut()[k] = x0;
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
        report.push((name.clone(), worst));
    }
    Ok(report)
}

/// Input shapes used when none are supplied for `kind`.
pub fn default_shapes(kind: OpKind) -> Vec<Vec<usize>> {
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![vec![3, 4], vec![4]],
        OpKind::MatMul => vec![vec![3, 4], vec![4, 2]],
        OpKind::Concat => vec![vec![2, 3], vec![4, 3]],
        OpKind::SquaredError => vec![vec![3, 4], vec![3, 4]],
        OpKind::SoftmaxCrossEntropy => vec![vec![4, 5]],
        OpKind::LstmGates => vec![vec![2, 12]],
        OpKind::LstmCellState | OpKind::LstmOutput => vec![vec![2, 12], vec![2, 3]],
        OpKind::Zoneout => vec![vec![2, 5], vec![2, 5]],
        OpKind::AdditiveScores => vec![vec![6, 4], vec![2, 4], vec![4]],
        OpKind::Attend => vec![vec![4, 3], vec![6, 4]],
        OpKind::GatherRows | OpKind::Im2Col => vec![vec![6, 3]],
        _ => vec![vec![3, 4]],
    }
}

fn random_tensor(shape: &[usize], seed: u64, index: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "gradcheck.input", 0, index);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is consistent")
}

/// Attributes that make `kind` well-defined for `shapes`.
fn attrs_for(kind: OpKind, shapes: &[Vec<usize>], seed: u64) -> OpAttrs {
    let mut r = rng::stream(seed, "gradcheck.attrs", 0, 0);
    let mut a = OpAttrs { scale: 1.7, rate: 0.3, ..Default::default() };
    let s0 = &shapes[0];
    let rows = s0.iter().product::<usize>() / s0.last().copied().unwrap_or(1);
    let cols = s0.last().copied().unwrap_or(1);
    match kind {
        OpKind::Concat => {
            a.axis = (0..s0.len()).find(|&i| shapes.iter().any(|s| s[i] != s0[i])).unwrap_or(0);
        }
        OpKind::Slice => {
            a.axis = s0.len() - 1;
            a.start = usize::from(cols > 2);
            a.end = cols;
        }
        OpKind::Reshape => a.shape = vec![s0.iter().product()],
        OpKind::Broadcast => {
            a.shape = std::iter::once(3).chain(s0.iter().copied()).collect();
        }
        OpKind::SquaredError => a.row_weights = Some((0..rows).map(|_| r.random_range(0.1..1.0)).collect()),
        OpKind::SigmoidCrossEntropy => {
            let n: usize = s0.iter().product();
            a.targets = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
            a.row_weights = Some((0..n).map(|_| r.random_range(0.1..1.0)).collect());
        }
        OpKind::SoftmaxCrossEntropy => {
            a.classes = (0..rows).map(|_| r.random_range(0..cols)).collect();
            a.row_weights = Some((0..rows).map(|_| r.random_range(0.1..1.0)).collect());
        }
        OpKind::Dropout | OpKind::Zoneout => a.seed = Some(seed),
        OpKind::GatherRows => a.indices = (0..rows + 2).map(|_| r.random_range(0..rows)).collect(),
        OpKind::Im2Col => {
            a.batch = if rows % 2 == 0 { 2 } else { 1 };
            a.seq = rows / a.batch;
            a.kernel = 3;
        }
        OpKind::AdditiveScores => {
            let qrows = shapes[1][0];
            a.seq = s0[0] / qrows.max(1);
            a.heads = if cols % 2 == 0 { 2 } else { 1 };
        }
        OpKind::Attend => {
            a.seq = cols;
            let vrows = shapes[1][0];
            a.heads = (rows * a.seq / vrows.max(1)).max(1);
        }
        _ => {}
    }
    a
}

/// Gradient check of a single registered op on random inputs of the given
/// shapes. Non-scalar outputs are reduced with fixed random weights.
pub fn grad_check(kind: OpKind, shapes: &[Vec<usize>], seed: u64, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(TensorError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let shapes: Vec<Vec<usize>> = if shapes.is_empty() { default_shapes(kind) } else { shapes.to_vec() };
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| match kind {
            OpKind::Log => random_tensor(s, seed, i as u64, 0.5, 2.0),
            OpKind::Relu => random_tensor(s, seed, i as u64, -1.0, 1.0).map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x }),
            _ => random_tensor(s, seed, i as u64, -1.0, 1.0),
        })
        .collect();
    let attrs = attrs_for(kind, &shapes, seed);
    check_gradients(&inputs, eps, |g, vars| {
        let y = forward_op(g, kind, vars, &attrs)?;
        if kind.is_scalar_output() {
            return Ok(y);
        }
        let w = random_tensor(g.shape(y), seed, 999, -1.0, 1.0);
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        g.sum(p)
    })
}

/// Gradient check of the composition `outer(inner(x))` for unary ops.
pub fn grad_check_chain(inner: OpKind, outer: OpKind, shape: &[usize], seed: u64, eps: f64) -> Result<f64> {
    for k in [inner, outer] {
        if k.arity() != 1 || k.is_scalar_output() {
            return Err(TensorError::InvalidArgument(format!("`{k}` is not a unary elementwise op")));
        }
    }
    let x = random_tensor(shape, seed, 0, 0.2, 1.0);
    let ia = attrs_for(inner, &[shape.to_vec()], seed);
    check_gradients(&[x], eps, |g, vars| {
        let y = forward_op(g, inner, vars, &ia)?;
        let oa = attrs_for(outer, &[g.shape(y).to_vec()], seed);
        let z = forward_op(g, outer, &[y], &oa)?;
        let w = random_tensor(g.shape(z), seed, 998, -1.0, 1.0);
        let w = g.constant(w);
        let p = g.mul(z, w)?;
        g.sum(p)
    })
}
