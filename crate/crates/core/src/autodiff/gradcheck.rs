//! Finite-difference verification of every graph operation.
//!
//! The checker builds the op twice: once recording gradients, once as a
//! plain closure re-evaluated under central differences. Non-scalar outputs
//! are contracted against a fixed random weight tensor so that ops with
//! internal constraints (softmax rows summing to one) still get a
//! non-degenerate probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::graph::{Graph, Mode, NodeId};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

/// Every operation kind the engine implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Matmul,
    Add,
    Mul,
    Concat,
    Relu,
    Sigmoid,
    Softmax,
    Log,
    Mean,
    BatchNorm,
    Dropout,
    Scale,
    Clamp,
    Exp,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Concat => "concat",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::Log => "log",
            OpKind::Mean => "mean",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Dropout => "dropout",
            OpKind::Scale => "scale",
            OpKind::Clamp => "clamp",
            OpKind::Exp => "exp",
        }
    }
}

pub const ALL_OPS: [OpKind; 14] = [
    OpKind::Matmul,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Concat,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Softmax,
    OpKind::Log,
    OpKind::Mean,
    OpKind::BatchNorm,
    OpKind::Dropout,
    OpKind::Scale,
    OpKind::Clamp,
    OpKind::Exp,
];

const CLAMP_LO: f64 = -0.8;
const CLAMP_HI: f64 = 0.8;
const SCALE_FACTOR: f64 = 1.7;
const DROPOUT_RATIO: f64 = 0.3;

/// A concrete evaluation point for one op: its input tensors plus the RNG
/// seed that fixes the dropout mask across re-evaluations.
#[derive(Debug, Clone)]
pub struct SamplePoint {
    pub inputs: Vec<Tensor>,
    pub seed: u64,
}

/// Draws a random, finite sample point sized for the op. Points for kinked
/// ops (relu, clamp) are nudged away from the non-differentiable set, where
/// central differences are invalid.
pub fn sample_point(op: OpKind, rng: &mut ChaCha8Rng) -> SamplePoint {
    let seed = rng.gen();
    let mut draw = |rows: usize, cols: usize, lo: f64, hi: f64| {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(vec![rows, cols], data).expect("sizes match")
    };
    let inputs = match op {
        OpKind::Matmul => vec![draw(2, 3, -2.0, 2.0), draw(3, 2, -2.0, 2.0)],
        OpKind::Add | OpKind::Mul => vec![draw(2, 3, -2.0, 2.0), draw(2, 3, -2.0, 2.0)],
        OpKind::Concat => vec![draw(2, 2, -2.0, 2.0), draw(2, 3, -2.0, 2.0)],
        OpKind::Relu => {
            let mut t = draw(2, 3, -2.0, 2.0);
            nudge_away(t.data_mut(), &[0.0]);
            vec![t]
        }
        OpKind::Clamp => {
            let mut t = draw(2, 3, -2.0, 2.0);
            nudge_away(t.data_mut(), &[CLAMP_LO, CLAMP_HI]);
            vec![t]
        }
        OpKind::Log => vec![draw(2, 3, 0.2, 2.0)],
        OpKind::BatchNorm => vec![
            draw(4, 3, -2.0, 2.0),
            draw(1, 3, 0.5, 1.5),
            draw(1, 3, -0.5, 0.5),
        ],
        OpKind::Sigmoid | OpKind::Softmax | OpKind::Mean | OpKind::Scale | OpKind::Exp => {
            vec![draw(2, 3, -2.0, 2.0)]
        }
        OpKind::Dropout => vec![draw(3, 3, -2.0, 2.0)],
    };
    SamplePoint { inputs, seed }
}

fn nudge_away(data: &mut [f64], kinks: &[f64]) {
    for v in data {
        for &k in kinks {
            if (*v - k).abs() < 0.01 {
                *v = k + if *v >= k { 0.02 } else { -0.02 };
            }
        }
    }
}

fn apply_op(op: OpKind, g: &mut Graph, ids: &[NodeId], seed: u64) -> Result<NodeId> {
    match op {
        OpKind::Matmul => g.matmul(ids[0], ids[1]),
        OpKind::Add => g.add(ids[0], ids[1]),
        OpKind::Mul => g.mul(ids[0], ids[1]),
        OpKind::Concat => g.concat(ids),
        OpKind::Relu => g.relu(ids[0]),
        OpKind::Sigmoid => g.sigmoid(ids[0]),
        OpKind::Softmax => g.softmax(ids[0]),
        OpKind::Log => g.log(ids[0]),
        OpKind::Mean => g.mean(ids[0]),
        OpKind::BatchNorm => g.batch_norm_train(ids[0], ids[1], ids[2]).map(|(y, _, _)| y),
        OpKind::Dropout => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            g.dropout(ids[0], DROPOUT_RATIO, Mode::Train, &mut rng)
        }
        OpKind::Scale => g.scale(ids[0], SCALE_FACTOR),
        OpKind::Clamp => g.clamp(ids[0], CLAMP_LO, CLAMP_HI),
        OpKind::Exp => g.exp(ids[0]),
    }
}

/// Contracts a node against fixed weights so the probe scalar depends on
/// every output entry: returns sum(w ⊙ out).
fn contract(g: &mut Graph, out: NodeId, weights: &Tensor) -> Result<NodeId> {
    if g.shape(out) == [1, 1] {
        return Ok(out);
    }
    let w = g.input(weights)?;
    let prod = g.mul(out, w)?;
    let m = g.mean(prod)?;
    g.scale(m, weights.len() as f64)
}

/// Max relative error between the analytic gradient and central differences
/// at `point`: max over all input entries of |analytic - fd| / max(1, |fd|).
pub fn grad_check(op: OpKind, point: &SamplePoint, h: f64) -> Result<f64> {
    // Probe weights are fixed per call so both evaluation routes agree.
    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = point
            .inputs
            .iter()
            .map(|t| g.input(t))
            .collect::<Result<_>>()?;
        let out = apply_op(op, &mut g, &ids, point.seed)?;
        g.shape(out)
    };
    let mut wrng = ChaCha8Rng::seed_from_u64(point.seed ^ 0x9e3779b97f4a7c15);
    let weights = Tensor::new(
        vec![out_shape[0], out_shape[1]],
        (0..out_shape[0] * out_shape[1])
            .map(|_| wrng.gen_range(-1.0..1.0))
            .collect(),
    )
    .expect("sizes match");

    // Analytic gradients of the probe scalar.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = point
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(&format!("in{i}"), t))
        .collect::<Result<_>>()?;
    let out = apply_op(op, &mut g, &ids, point.seed)?;
    let scalar = contract(&mut g, out, &weights)?;
    let grads = g.backward(scalar)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| grads.of(id, &g)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t)).collect::<Result<_>>()?;
        let out = apply_op(op, &mut g, &ids, point.seed)?;
        let scalar = contract(&mut g, out, &weights)?;
        Ok(g.value(scalar)[0])
    };

    let mut max_err = 0.0f64;
    for (i, tensor) in point.inputs.iter().enumerate() {
        for e in 0..tensor.len() {
            let mut plus = point.inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = point.inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let err = (analytic[i][e] - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// One row of a gradient-check report.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: OpKind,
    pub max_error: f64,
}

/// Checks every op kind at `points` random sample points each; reports the
/// worst error per op.
pub fn check_all_ops(points: usize, h: f64, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Vec::with_capacity(ALL_OPS.len());
    for &op in ALL_OPS.iter() {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let point = sample_point(op, &mut rng);
            worst = worst.max(grad_check(op, &point, h)?);
        }
        report.push(OpCheck { op, max_error: worst });
    }
    Ok(report)
}

/// Central-difference gradient of an arbitrary scalar function, used by the
/// end-to-end model check. The callee must be deterministic in `point`.
pub fn central_difference<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; point.len()];
    let mut work = point.to_vec();
    for i in 0..point.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work)?;
        work[i] = orig - h;
        let fm = f(&work)?;
        work[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Spec error measure: max over entries of |a - b| / max(1, |b|).
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}
