//! String-addressable op registry used by generic tooling such as gradient checks.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Result, TensorError};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Concat,
    Slice,
    Transpose,
    Reshape,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Softmax,
    ReduceSum,
    ReduceMean,
    SquaredError,
    SigmoidCrossEntropy,
    SoftmaxCrossEntropy,
    Dropout,
    Broadcast,
    GatherRows,
    Im2Col,
    LstmGates,
    LstmCellState,
    LstmOutput,
    Zoneout,
    AdditiveScores,
    Attend,
}

impl OpKind {
    pub const ALL: [OpKind; 30] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MatMul,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Softmax,
        OpKind::ReduceSum,
        OpKind::ReduceMean,
        OpKind::SquaredError,
        OpKind::SigmoidCrossEntropy,
        OpKind::SoftmaxCrossEntropy,
        OpKind::Dropout,
        OpKind::Broadcast,
        OpKind::GatherRows,
        OpKind::Im2Col,
        OpKind::LstmGates,
        OpKind::LstmCellState,
        OpKind::LstmOutput,
        OpKind::Zoneout,
        OpKind::AdditiveScores,
        OpKind::Attend,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softmax => "softmax",
            OpKind::ReduceSum => "reduce-sum",
            OpKind::ReduceMean => "reduce-mean",
            OpKind::SquaredError => "squared-error",
            OpKind::SigmoidCrossEntropy => "sigmoid-cross-entropy",
            OpKind::SoftmaxCrossEntropy => "softmax-cross-entropy",
            OpKind::Dropout => "dropout",
            OpKind::Broadcast => "broadcast",
            OpKind::GatherRows => "gather-rows",
            OpKind::Im2Col => "im2col",
            OpKind::LstmGates => "lstm-gates",
            OpKind::LstmCellState => "lstm-cell-state",
            OpKind::LstmOutput => "lstm-output",
            OpKind::Zoneout => "zoneout",
            OpKind::AdditiveScores => "additive-scores",
            OpKind::Attend => "attend",
        }
    }

    /// Number of tensor inputs the op takes.
    pub fn arity(self) -> usize {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::MatMul
            | OpKind::SquaredError
            | OpKind::LstmCellState
            | OpKind::LstmOutput
            | OpKind::Zoneout
            | OpKind::Attend => 2,
            OpKind::Concat => 2,
            OpKind::AdditiveScores => 3,
            _ => 1,
        }
    }

    /// Ops whose output is already a scalar loss.
    pub fn is_scalar_output(self) -> bool {
        matches!(
            self,
            OpKind::ReduceSum | OpKind::ReduceMean | OpKind::SquaredError | OpKind::SigmoidCrossEntropy | OpKind::SoftmaxCrossEntropy
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL.iter().copied().find(|k| k.name() == s).ok_or_else(|| TensorError::UnknownOp(s.to_string()))
    }
}

/// Non-tensor arguments for [`forward_op`]. Unused fields are ignored.
#[derive(Debug, Clone, Default)]
pub struct OpAttrs {
    pub axis: usize,
    pub start: usize,
    pub end: usize,
    pub scale: f64,
    pub shape: Vec<usize>,
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
    pub targets: Vec<f64>,
    pub row_weights: Option<Vec<f64>>,
    /// Dropout rate or zoneout probability.
    pub rate: f64,
    /// Seed for stochastic ops; `None` means inference mode.
    pub seed: Option<u64>,
    pub heads: usize,
    pub seq: usize,
    pub batch: usize,
    pub kernel: usize,
}

/// Applies `kind` to `inputs` on `g`.
pub fn forward_op<T: Real>(g: &mut Graph<T>, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
    let need = kind.arity();
    let variadic = kind == OpKind::Concat;
    if (!variadic && inputs.len() != need) || inputs.is_empty() {
        return Err(shape_err("forward_op", format!("`{kind}` takes {need} inputs, got {}", inputs.len())));
    }
    let x = inputs[0];
    let lit = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
    match kind {
        OpKind::Add => g.add(x, inputs[1]),
        OpKind::Sub => g.sub(x, inputs[1]),
        OpKind::Mul => g.mul(x, inputs[1]),
        OpKind::Scale => g.scale(x, T::lit(attrs.scale)),
        OpKind::MatMul => g.matmul(x, inputs[1]),
        OpKind::Concat => g.concat(inputs, attrs.axis),
        OpKind::Slice => g.slice(x, attrs.axis, attrs.start, attrs.end),
        OpKind::Transpose => g.transpose(x),
        OpKind::Reshape => g.reshape(x, &attrs.shape),
        OpKind::Sigmoid => g.sigmoid(x),
        OpKind::Tanh => g.tanh(x),
        OpKind::Relu => g.relu(x),
        OpKind::Exp => g.exp(x),
        OpKind::Log => g.log(x),
        OpKind::Softmax => g.softmax(x),
        OpKind::ReduceSum => g.sum(x),
        OpKind::ReduceMean => g.mean(x),
        OpKind::SquaredError => {
            let w = attrs.row_weights.as_deref().map(lit);
            g.squared_error(x, inputs[1], w.as_deref())
        }
        OpKind::SigmoidCrossEntropy => {
            let w = attrs.row_weights.as_deref().map(lit);
            g.sigmoid_cross_entropy(x, &lit(&attrs.targets), w.as_deref())
        }
        OpKind::SoftmaxCrossEntropy => {
            let w = attrs.row_weights.as_deref().map(lit);
            g.softmax_cross_entropy(x, &attrs.classes, w.as_deref())
        }
        OpKind::Dropout => match attrs.seed {
            Some(seed) => g.dropout(x, attrs.rate, Some(&mut rng::stream(seed, "dropout", 0, 0))),
            None => g.dropout::<rng::Stream>(x, attrs.rate, None),
        },
        OpKind::Broadcast => g.broadcast(x, &attrs.shape),
        OpKind::GatherRows => g.gather_rows(x, &attrs.indices),
        OpKind::Im2Col => g.im2col(x, attrs.batch, attrs.seq, attrs.kernel),
        OpKind::LstmGates => g.lstm_gates(x),
        OpKind::LstmCellState => g.lstm_cell_state(x, inputs[1]),
        OpKind::LstmOutput => g.lstm_output(x, inputs[1]),
        OpKind::Zoneout => {
            if !(0.0..=1.0).contains(&attrs.rate) {
                return Err(TensorError::InvalidArgument(format!("zoneout probability {}", attrs.rate)));
            }
            match attrs.seed {
                Some(seed) => {
                    use rand::Rng;
                    let mut r = rng::stream(seed, "zoneout", 0, 0);
                    let n = g.value(x).len();
                    let mask = (0..n).map(|_| if r.random::<f64>() < attrs.rate { T::one() } else { T::zero() }).collect();
                    g.zoneout_mask(x, inputs[1], mask)
                }
                None => g.zoneout_expect(x, inputs[1], T::lit(attrs.rate)),
            }
        }
        OpKind::AdditiveScores => g.additive_scores(x, inputs[1], inputs[2], attrs.heads, attrs.seq),
        OpKind::Attend => g.attend(x, inputs[1], attrs.heads, attrs.seq),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert!(matches!("conv9d".parse::<OpKind>(), Err(TensorError::UnknownOp(_))));
    }
}
