//! Reverse-mode differentiation over a flat operation tape.
//!
//! A [`Graph`] records one forward pass as an append-only list of nodes.
//! Node inputs always have smaller ids than the node itself, so the list is
//! topologically sorted by construction and the backward pass is a single
//! walk in exact reverse insertion order.
//!
//! All node values are 2-D row-major `[rows, cols]` buffers; scalars are
//! `[1, 1]`. Every op validates shapes and rejects non-finite outputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Execution mode: training applies dropout and batch statistics, eval is
/// deterministic and uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A · B for [m,k]·[k,n].
    Matmul(NodeId, NodeId),
    /// Elementwise add; also broadcasts a [1,c] row or [r,1] column operand.
    Add(NodeId, NodeId),
    /// Elementwise product with the same broadcast rules as Add.
    Mul(NodeId, NodeId),
    /// Column-wise concatenation of same-row tensors.
    Concat(Vec<NodeId>),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Softmax along the last axis (per row), max-subtracted for stability.
    Softmax(NodeId),
    Log(NodeId),
    /// Mean over all entries, yielding a [1,1] scalar.
    Mean(NodeId),
    /// Batch normalization over rows, per column. In train mode the saved
    /// moments are the batch moments and the gradient flows through them;
    /// in eval mode they are constants supplied by the caller.
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        train: bool,
    },
    /// Inverted dropout; `mask` entries are 0 or 1/keep.
    Dropout { x: NodeId, mask: Vec<f64> },
    Scale(NodeId, f64),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Exp(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: [usize; 2],
    value: Vec<f64>,
    /// True when some ancestor is a gradient-tracked leaf.
    needs_grad: bool,
    /// Parameter name for trainable leaves.
    param: Option<String>,
}

/// Gradients produced by [`Graph::backward`], indexed by node id. Nodes the
/// loss does not reach keep zero gradients.
pub struct Gradients {
    per_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer of a node; zeros if the loss never reached it.
    pub fn of(&self, id: NodeId, graph: &Graph) -> Vec<f64> {
        match &self.per_node[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; graph.nodes[id.0].value.len()],
        }
    }

    pub fn of_ref(&self, id: NodeId) -> Option<&[f64]> {
        self.per_node[id.0].as_deref()
    }
}

/// Operation tape. Build nodes with the op methods, then call
/// [`Graph::backward`] on a scalar loss node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const PAR_MATMUL_WORK: usize = 1 << 16;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].shape
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let [r, c] = self.nodes[id.0].shape;
        Tensor::new(vec![r, c], self.nodes[id.0].value.clone()).expect("node shape is consistent")
    }

    pub fn param_name(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].param.as_deref()
    }

    /// Iterates (name, id) over all parameter leaves in insertion order.
    pub fn params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.as_deref().map(|p| (p, NodeId(i))))
    }

    fn shape2(t: &Tensor, op: &str) -> Result<[usize; 2]> {
        match t.shape() {
            [r, c] => Ok([*r, *c]),
            s => Err(Error::dimension(op, format!("expected 2-D tensor, got {:?}", s))),
        }
    }

    /// Adds a constant input leaf (no gradient tracking).
    pub fn input(&mut self, t: &Tensor) -> Result<NodeId> {
        let shape = Self::shape2(t, "input")?;
        self.push(Op::Leaf, shape, t.data().to_vec(), t.requires_grad(), None)
    }

    /// Adds a trainable parameter leaf. The value is copied from the store
    /// at recording time.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<NodeId> {
        let shape = Self::shape2(t, "param")?;
        self.push(Op::Leaf, shape, t.data().to_vec(), true, Some(name.to_string()))
    }

    fn push(
        &mut self,
        op: Op,
        shape: [usize; 2],
        value: Vec<f64>,
        needs_grad: bool,
        param: Option<String>,
    ) -> Result<NodeId> {
        debug_assert_eq!(shape[0] * shape[1], value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{} output", op_name(&op)),
            });
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
            param,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::dimension(
                "matmul",
                format!("[{m},{k}] · [{k2},{n}]"),
            ));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let needs = self.needs(&[a, b]);
        self.push(Op::Matmul(a, b), [m, n], out, needs, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_broadcast(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| {
            Error::dimension(name, format!("{:?} vs {:?}", sa, sb))
        })?;
        let [r, c] = out_shape;
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(broadcast_at(va, sa, i, j), broadcast_at(vb, sb, i, j)));
            }
        }
        let needs = self.needs(&[a, b]);
        self.push(op, out_shape, out, needs, None)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let rows = self.shape(parts[0])[0];
        let mut cols = 0;
        for &p in parts {
            let [r, c] = self.shape(p);
            if r != rows {
                return Err(Error::dimension(
                    "concat",
                    format!("row mismatch: {} vs {}", rows, r),
                ));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let [_, c] = self.shape(p);
                let v = self.value(p);
                out.extend_from_slice(&v[i * c..(i + 1) * c]);
            }
        }
        let needs = self.needs(parts);
        self.push(Op::Concat(parts.to_vec()), [rows, cols], out, needs, None)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let needs = self.needs(&[x]);
        self.push(Op::Relu(x), shape, out, needs, None)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let needs = self.needs(&[x]);
        self.push(Op::Sigmoid(x), shape, out, needs, None)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x);
        let [r, c] = shape;
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let needs = self.needs(&[x]);
        self.push(Op::Softmax(x), shape, out, needs, None)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|&v| v.ln()).collect();
        let needs = self.needs(&[x]);
        self.push(Op::Log(x), shape, out, needs, None)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(&[x]);
        self.push(Op::Mean(x), [1, 1], vec![m], needs, None)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let shape = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|&v| v * factor).collect();
        let needs = self.needs(&[x]);
        self.push(Op::Scale(x, factor), shape, out, needs, None)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let shape = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|&v| v.clamp(lo, hi)).collect();
        let needs = self.needs(&[x]);
        self.push(Op::Clamp { x, lo, hi }, shape, out, needs, None)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|&v| v.exp()).collect();
        let needs = self.needs(&[x]);
        self.push(Op::Exp(x), shape, out, needs, None)
    }

    /// Train-mode batch norm: normalizes each column with the batch moments
    /// (population variance, eps 1e-5), then applies `gamma`/`beta`. Returns
    /// the output node plus the batch moments so the caller can update its
    /// running statistics. Batch size must be at least 2.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let [r, c] = self.shape(x);
        if r < 2 {
            return Err(Error::Contract(
                "batch_norm in train mode needs batch size >= 2".into(),
            ));
        }
        self.check_affine_shapes(gamma, beta, c)?;
        let v = self.value(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for j in 0..c {
            let mut s = 0.0;
            for i in 0..r {
                s += v[i * c + j];
            }
            mean[j] = s / r as f64;
            let mut sq = 0.0;
            for i in 0..r {
                let d = v[i * c + j] - mean[j];
                sq += d * d;
            }
            var[j] = sq / r as f64;
        }
        let out = self.batch_norm_apply(x, gamma, beta, &mean, &var, true)?;
        Ok((out, mean, var))
    }

    /// Eval-mode batch norm with caller-supplied running moments.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<NodeId> {
        let [_, c] = self.shape(x);
        self.check_affine_shapes(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dimension(
                "batchnorm",
                format!("running stats len {} vs {} columns", running_mean.len(), c),
            ));
        }
        self.batch_norm_apply(x, gamma, beta, running_mean, running_var, false)
    }

    fn check_affine_shapes(&self, gamma: NodeId, beta: NodeId, c: usize) -> Result<()> {
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(id);
            if s != [1, c] {
                return Err(Error::dimension(
                    "batchnorm",
                    format!("{} shape {:?}, expected [1, {}]", name, s, c),
                ));
            }
        }
        Ok(())
    }

    fn batch_norm_apply(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        train: bool,
    ) -> Result<NodeId> {
        let [r, c] = self.shape(x);
        let v = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let inv = 1.0 / (var[j] + BN_EPS).sqrt();
            for i in 0..r {
                let xh = (v[i * c + j] - mean[j]) * inv;
                out[i * c + j] = g[j] * xh + b[j];
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                var: var.to_vec(),
                train,
            },
            [r, c],
            out,
            needs,
            None,
        )
    }

    /// Inverted dropout. Train mode zeroes entries with probability `ratio`
    /// and scales survivors by 1/(1-ratio); eval mode is the identity.
    pub fn dropout(
        &mut self,
        x: NodeId,
        ratio: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Contract(format!(
                "dropout ratio must be in [0, 1), got {ratio}"
            )));
        }
        let shape = self.shape(x);
        if mode == Mode::Eval || ratio == 0.0 {
            let out = self.value(x).to_vec();
            let needs = self.needs(&[x]);
            let mask = vec![1.0; out.len()];
            return self.push(Op::Dropout { x, mask }, shape, out, needs, None);
        }
        let keep = 1.0 - ratio;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..shape[0] * shape[1])
            .map(|_| if rng.gen::<f64>() < ratio { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let needs = self.needs(&[x]);
        self.push(Op::Dropout { x, mask }, shape, out, needs, None)
    }

    /// Reverse pass from a scalar loss node. Visits the tape in exact
    /// reverse insertion order and accumulates gradients into every
    /// gradient-tracked node; unreachable nodes report zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[id].clone() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let [m, k] = self.shape(*a);
                    let n = self.shape(*b)[1];
                    if self.nodes[a.0].needs_grad {
                        // dA = dC · B^T
                        let vb = self.value(*b);
                        let ga = accum(&mut grads, *a, m * k);
                        for i in 0..m {
                            for j in 0..n {
                                let g = gout[i * n + j];
                                if g != 0.0 {
                                    for l in 0..k {
                                        ga[i * k + l] += g * vb[l * n + j];
                                    }
                                }
                            }
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        // dB = A^T · dC
                        let va = self.value(*a);
                        let gb = accum(&mut grads, *b, k * n);
                        for i in 0..m {
                            for l in 0..k {
                                let a_il = va[i * k + l];
                                if a_il != 0.0 {
                                    for j in 0..n {
                                        gb[l * n + j] += a_il * gout[i * n + j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let out_shape = node.shape;
                    for &(id_in, _other) in &[(*a, *b), (*b, *a)] {
                        if self.nodes[id_in.0].needs_grad {
                            let s = self.shape(id_in);
                            let g = accum(&mut grads, id_in, s[0] * s[1]);
                            reduce_broadcast(&gout, out_shape, s, g, |acc, v| *acc += v);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let out_shape = node.shape;
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    if self.nodes[a.0].needs_grad {
                        let vb = self.value(*b).to_vec();
                        let ga = accum(&mut grads, *a, sa[0] * sa[1]);
                        let [r, c] = out_shape;
                        for i in 0..r {
                            for j in 0..c {
                                let contrib = gout[i * c + j] * broadcast_at(&vb, sb, i, j);
                                *broadcast_at_mut(ga, sa, i, j) += contrib;
                            }
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let va = self.value(*a).to_vec();
                        let gb = accum(&mut grads, *b, sb[0] * sb[1]);
                        let [r, c] = out_shape;
                        for i in 0..r {
                            for j in 0..c {
                                let contrib = gout[i * c + j] * broadcast_at(&va, sa, i, j);
                                *broadcast_at_mut(gb, sb, i, j) += contrib;
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let [rows, cols] = node.shape;
                    let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p)[1]).collect();
                    let parts = parts.clone();
                    for (idx, &p) in parts.iter().enumerate() {
                        if !self.nodes[p.0].needs_grad {
                            continue;
                        }
                        let w = widths[idx];
                        let offset: usize = widths[..idx].iter().sum();
                        let gp = accum(&mut grads, p, rows * w);
                        for i in 0..rows {
                            for j in 0..w {
                                gp[i * w + j] += gout[i * cols + offset + j];
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let vx = self.value(*x);
                    let gx = accum(&mut grads, *x, vx.len());
                    for (g, (&v, &go)) in gx.iter_mut().zip(vx.iter().zip(&gout)) {
                        if v > 0.0 {
                            *g += go;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let gx = accum(&mut grads, *x, y.len());
                    for (g, (&yv, &go)) in gx.iter_mut().zip(y.iter().zip(&gout)) {
                        *g += go * yv * (1.0 - yv);
                    }
                }
                Op::Softmax(x) => {
                    let [r, c] = node.shape;
                    let y = &node.value;
                    let gx = accum(&mut grads, *x, r * c);
                    for i in 0..r {
                        let row = &y[i * c..(i + 1) * c];
                        let grow = &gout[i * c..(i + 1) * c];
                        let dot: f64 = row.iter().zip(grow).map(|(&yv, &g)| yv * g).sum();
                        for j in 0..c {
                            gx[i * c + j] += row[j] * (grow[j] - dot);
                        }
                    }
                }
                Op::Log(x) => {
                    let vx = self.value(*x);
                    let gx = accum(&mut grads, *x, vx.len());
                    for (g, (&v, &go)) in gx.iter_mut().zip(vx.iter().zip(&gout)) {
                        *g += go / v;
                    }
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let gx = accum(&mut grads, *x, n);
                    let per = gout[0] / n as f64;
                    gx.iter_mut().for_each(|g| *g += per);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    train,
                } => {
                    let [r, c] = node.shape;
                    let vx = self.value(*x).to_vec();
                    let vg = self.value(*gamma).to_vec();
                    let (mean, var, train) = (mean.clone(), var.clone(), *train);
                    // Per-column normalized inputs reused by all three grads.
                    let mut xhat = vec![0.0; r * c];
                    for j in 0..c {
                        let inv = 1.0 / (var[j] + BN_EPS).sqrt();
                        for i in 0..r {
                            xhat[i * c + j] = (vx[i * c + j] - mean[j]) * inv;
                        }
                    }
                    if self.nodes[gamma.0].needs_grad {
                        let gg = accum(&mut grads, *gamma, c);
                        for j in 0..c {
                            let mut s = 0.0;
                            for i in 0..r {
                                s += gout[i * c + j] * xhat[i * c + j];
                            }
                            gg[j] += s;
                        }
                    }
                    if self.nodes[beta.0].needs_grad {
                        let gb = accum(&mut grads, *beta, c);
                        for j in 0..c {
                            let mut s = 0.0;
                            for i in 0..r {
                                s += gout[i * c + j];
                            }
                            gb[j] += s;
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let gx = accum(&mut grads, *x, r * c);
                        for j in 0..c {
                            let inv = 1.0 / (var[j] + BN_EPS).sqrt();
                            if train {
                                // Batch moments depend on x: full train-mode rule.
                                let mut sum_g = 0.0;
                                let mut sum_gx = 0.0;
                                for i in 0..r {
                                    sum_g += gout[i * c + j];
                                    sum_gx += gout[i * c + j] * xhat[i * c + j];
                                }
                                let rn = r as f64;
                                for i in 0..r {
                                    let g = gout[i * c + j];
                                    gx[i * c + j] += vg[j] * inv
                                        * (g - sum_g / rn - xhat[i * c + j] * sum_gx / rn);
                                }
                            } else {
                                for i in 0..r {
                                    gx[i * c + j] += gout[i * c + j] * vg[j] * inv;
                                }
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let mask = mask.clone();
                    let gx = accum(&mut grads, *x, mask.len());
                    for (g, (&m, &go)) in gx.iter_mut().zip(mask.iter().zip(&gout)) {
                        *g += go * m;
                    }
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    let gx = accum(&mut grads, *x, gout.len());
                    for (g, &go) in gx.iter_mut().zip(&gout) {
                        *g += go * f;
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let vx = self.value(*x).to_vec();
                    let gx = accum(&mut grads, *x, vx.len());
                    for (g, (&v, &go)) in gx.iter_mut().zip(vx.iter().zip(&gout)) {
                        if v > lo && v < hi {
                            *g += go;
                        }
                    }
                }
                Op::Exp(x) => {
                    let y = &node.value;
                    let gx = accum(&mut grads, *x, y.len());
                    for (g, (&yv, &go)) in gx.iter_mut().zip(y.iter().zip(&gout)) {
                        *g += go * yv;
                    }
                }
            }
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("gradient of node {i} ({})", op_name(&self.nodes[i].op)),
                    });
                }
            }
        }
        Ok(Gradients { per_node: grads })
    }
}

const BN_EPS: f64 = 1e-5;

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Concat(..) => "concat",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Softmax(..) => "softmax",
        Op::Log(..) => "log",
        Op::Mean(..) => "mean",
        Op::BatchNorm { .. } => "batchnorm",
        Op::Dropout { .. } => "dropout",
        Op::Scale(..) => "scale",
        Op::Clamp { .. } => "clamp",
        Op::Exp(..) => "exp",
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accum<'a>(grads: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

/// Output shape for elementwise ops; `None` when incompatible. Supports
/// equal shapes plus [1,c] row and [r,1] column broadcasting on either side.
fn broadcast_shape(a: [usize; 2], b: [usize; 2]) -> Option<[usize; 2]> {
    if a == b {
        return Some(a);
    }
    let r = match (a[0], b[0]) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        _ => return None,
    };
    let c = match (a[1], b[1]) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        _ => return None,
    };
    Some([r, c])
}

fn broadcast_at(v: &[f64], shape: [usize; 2], i: usize, j: usize) -> f64 {
    let i = if shape[0] == 1 { 0 } else { i };
    let j = if shape[1] == 1 { 0 } else { j };
    v[i * shape[1] + j]
}

fn broadcast_at_mut(v: &mut [f64], shape: [usize; 2], i: usize, j: usize) -> &mut f64 {
    let i = if shape[0] == 1 { 0 } else { i };
    let j = if shape[1] == 1 { 0 } else { j };
    &mut v[i * shape[1] + j]
}

/// Folds an output-shaped gradient back onto a possibly-broadcast operand.
fn reduce_broadcast(
    gout: &[f64],
    out_shape: [usize; 2],
    in_shape: [usize; 2],
    gin: &mut [f64],
    f: impl Fn(&mut f64, f64),
) {
    let [r, c] = out_shape;
    for i in 0..r {
        for j in 0..c {
            f(broadcast_at_mut(gin, in_shape, i, j), gout[i * c + j]);
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |i: usize, out: &mut [f64]| {
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += a_il * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_MATMUL_WORK {
        // Row-parallel: each output row is written by exactly one thread,
        // so results are bit-identical regardless of thread count.
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, chunk)| row(i, chunk));
    } else {
        for i in 0..m {
            row(i, &mut out[i * n..(i + 1) * n]);
        }
    }
    out
}
