//! Upper stage of the model: per-task tower networks, sequential attention
//! transfer units between adjacent tasks, per-task probability heads, and
//! funnel probability transfer (click -> add-to-cart -> purchase).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Linear, Mlp, ParamStore};

/// Conditional stage probabilities for one sample: p(click | impression),
/// p(ATC | click), p(purchase | click, ATC). All strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskProbabilities {
    pub ctr: f64,
    pub avr: f64,
    pub cvr: f64,
}

/// Final model outputs after probability transfer: unconditional event
/// probabilities satisfying click >= atc >= purchase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferredOutputs {
    pub click: f64,
    pub atc: f64,
    pub purchase: f64,
}

impl TransferredOutputs {
    pub fn is_monotone(&self) -> bool {
        self.click >= self.atc && self.atc >= self.purchase
    }

    pub fn for_task(&self, task: usize) -> f64 {
        match task {
            0 => self.click,
            1 => self.atc,
            _ => self.purchase,
        }
    }
}

/// Funnel probability transfer over scalars:
/// click = ctr, atc = ctr*avr, purchase = ctr*avr*cvr.
pub fn probability_transfer(p: &TaskProbabilities) -> Result<TransferredOutputs> {
    for (name, v) in [("ctr", p.ctr), ("avr", p.avr), ("cvr", p.cvr)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!(
                "probability_transfer input {name}={v} outside [0, 1]"
            )));
        }
    }
    let click = p.ctr;
    let atc = p.ctr * p.avr;
    let purchase = atc * p.cvr;
    Ok(TransferredOutputs {
        click,
        atc,
        purchase,
    })
}

/// Graph version of the transfer, applied to per-sample probability columns.
pub fn transfer_nodes(
    cx: &mut ForwardCtx,
    p_ctr: NodeId,
    p_avr: NodeId,
    p_cvr: NodeId,
) -> Result<[NodeId; 3]> {
    let click = p_ctr;
    let atc = cx.graph.mul(p_ctr, p_avr)?;
    let purchase = cx.graph.mul(atc, p_cvr)?;
    Ok([click, atc, purchase])
}

/// Per-task tower mapping the extraction output to a fixed-size task
/// representation (plain ReLU MLP, affine output).
#[derive(Debug, Clone)]
pub struct Tower {
    mlp: Mlp,
}

impl Tower {
    pub fn new(name: &str, in_dim: usize, hidden: &[usize], out_dim: usize) -> Self {
        Tower {
            mlp: Mlp::tower(name, in_dim, hidden, out_dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.mlp.init(store, rng)
    }

    pub fn forward(&self, cx: &mut ForwardCtx, v: NodeId) -> Result<NodeId> {
        self.mlp.forward(cx, v)
    }
}

/// How the unit reads its output from the attended token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionRead {
    /// Output at the current task token's position.
    Position,
    /// Mean over all token outputs.
    Pooled,
}

/// Single-head scaled dot-product attention over a short token sequence:
/// the current task's tower output, plus the previous task's unit output
/// when there is one. Q/K/V are per-unit weight matrices without bias;
/// d_k equals the token dimension.
#[derive(Debug, Clone)]
pub struct AttentionUnit {
    pub name: String,
    pub dim: usize,
    pub read: AttentionRead,
}

/// Result of one attention unit: its output token plus the softmax rows
/// (one `[B, n_tokens]` node per query position) for inspection.
pub struct AttentionOutput {
    pub output: NodeId,
    pub rows: Vec<NodeId>,
}

impl AttentionUnit {
    pub fn new(name: impl Into<String>, dim: usize, read: AttentionRead) -> Self {
        AttentionUnit {
            name: name.into(),
            dim,
            read,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for mat in ["wq", "wk", "wv"] {
            Linear::new(format!("{}.{mat}", self.name), self.dim, self.dim, false)
                .init(store, rng)?;
        }
        Ok(())
    }

    /// `prev` is the previous task's unit output; absent for the first task.
    pub fn forward(
        &self,
        cx: &mut ForwardCtx,
        t_k: NodeId,
        prev: Option<NodeId>,
    ) -> Result<AttentionOutput> {
        let tokens: Vec<NodeId> = match prev {
            None => vec![t_k],
            Some(a) => vec![t_k, a],
        };
        for &tok in &tokens {
            let [_, c] = cx.graph.shape(tok);
            if c != self.dim {
                return Err(Error::dimension(
                    "attention",
                    format!("token dim {} vs unit dim {}", c, self.dim),
                ));
            }
        }
        let wq = cx.param(&format!("{}.wq.w", self.name))?;
        let wk = cx.param(&format!("{}.wk.w", self.name))?;
        let wv = cx.param(&format!("{}.wv.w", self.name))?;
        let q: Vec<NodeId> = tokens
            .iter()
            .map(|&t| cx.graph.matmul(t, wq))
            .collect::<Result<_>>()?;
        let k: Vec<NodeId> = tokens
            .iter()
            .map(|&t| cx.graph.matmul(t, wk))
            .collect::<Result<_>>()?;
        let v: Vec<NodeId> = tokens
            .iter()
            .map(|&t| cx.graph.matmul(t, wv))
            .collect::<Result<_>>()?;

        let inv_sqrt_dk = 1.0 / (self.dim as f64).sqrt();
        let ones = cx.constant(Tensor::filled(vec![self.dim, 1], 1.0))?;
        let n = tokens.len();

        let mut outputs = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for qi in &q {
            // Per-sample dot products of this query row with every key row.
            let mut scores = Vec::with_capacity(n);
            for kj in &k {
                let prod = cx.graph.mul(*qi, *kj)?;
                let dot = cx.graph.matmul(prod, ones)?; // [B, 1]
                scores.push(cx.graph.scale(dot, inv_sqrt_dk)?);
            }
            let score_row = cx.graph.concat(&scores)?; // [B, n]
            let weights = cx.graph.softmax(score_row)?;
            rows.push(weights);

            let mut mixed: Option<NodeId> = None;
            for (j, vj) in v.iter().enumerate() {
                let mut onehot = vec![0.0; n];
                onehot[j] = 1.0;
                let sel = cx.constant(Tensor::new(vec![n, 1], onehot)?)?;
                let w_j = cx.graph.matmul(weights, sel)?; // [B, 1]
                let term = cx.graph.mul(*vj, w_j)?;
                mixed = Some(match mixed {
                    None => term,
                    Some(m) => cx.graph.add(m, term)?,
                });
            }
            outputs.push(mixed.expect("at least one token"));
        }

        let output = match self.read {
            AttentionRead::Position => outputs[0],
            AttentionRead::Pooled => {
                let mut acc = outputs[0];
                for &o in &outputs[1..] {
                    acc = cx.graph.add(acc, o)?;
                }
                cx.graph.scale(acc, 1.0 / n as f64)?
            }
        };
        Ok(AttentionOutput { output, rows })
    }
}

/// Per-task probability head: single affine layer to one logit, sigmoid.
#[derive(Debug, Clone)]
pub struct ProbabilityHead {
    linear: Linear,
}

impl ProbabilityHead {
    pub fn new(name: &str, in_dim: usize) -> Self {
        ProbabilityHead {
            linear: Linear::new(name, in_dim, 1, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.linear.init(store, rng)
    }

    pub fn forward(&self, cx: &mut ForwardCtx, a: NodeId) -> Result<NodeId> {
        let logit = self.linear.forward(cx, a)?;
        cx.graph.sigmoid(logit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn transfer_matches_direct_products() {
        let out = probability_transfer(&TaskProbabilities {
            ctr: 0.5,
            avr: 0.4,
            cvr: 0.3,
        })
        .unwrap();
        assert_abs_diff_eq!(out.click, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out.atc, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(out.purchase, 0.06, epsilon = 1e-15);
    }

    #[test]
    fn transfer_of_ones_is_identity_chain() {
        let out = probability_transfer(&TaskProbabilities {
            ctr: 1.0,
            avr: 1.0,
            cvr: 1.0,
        })
        .unwrap();
        assert_eq!((out.click, out.atc, out.purchase), (1.0, 1.0, 1.0));
    }

    #[test]
    fn transfer_is_monotone_for_any_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = TaskProbabilities {
                ctr: rng.gen_range(0.0..1.0),
                avr: rng.gen_range(0.0..1.0),
                cvr: rng.gen_range(0.0..1.0),
            };
            assert!(probability_transfer(&p).unwrap().is_monotone());
        }
    }

    #[test]
    fn transfer_rejects_out_of_range_input() {
        let p = TaskProbabilities {
            ctr: 1.2,
            avr: 0.5,
            cvr: 0.5,
        };
        assert!(probability_transfer(&p).is_err());
    }

    #[test]
    fn zero_initialized_biasfree_tower_maps_zero_to_zero() {
        let tower = Tower::new("t", 4, &[3], 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        tower.init(&mut store, &mut rng).unwrap();
        for name in store.trainable_names() {
            let t = store.get_mut(&name).unwrap();
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut cx = ForwardCtx::new(&mut store, Mode::Eval, 0);
        let x = cx.input(&Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap()).unwrap();
        let y = tower.forward(&mut cx, x).unwrap();
        assert!(cx.graph.value(y).iter().all(|&v| v == 0.0));
        assert_eq!(cx.graph.shape(y), [2, 2]);
    }

    #[test]
    fn tower_matches_straight_line_mlp() {
        let tower = Tower::new("t", 3, &[4], 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        tower.init(&mut store, &mut rng).unwrap();
        let x = vec![0.3, -0.8, 1.1];
        let mut cx = ForwardCtx::new(&mut store, Mode::Eval, 0);
        let xid = cx.input(&Tensor::new(vec![1, 3], x.clone()).unwrap()).unwrap();
        let y = tower.forward(&mut cx, xid).unwrap();
        let got = cx.graph.value(y).to_vec();
        drop(cx);

        let w0 = store.get("t.l0.w").unwrap();
        let b0 = store.get("t.l0.b").unwrap();
        let w1 = store.get("t.out.w").unwrap();
        let b1 = store.get("t.out.b").unwrap();
        let mut h = vec![0.0; 4];
        for j in 0..4 {
            let mut acc = b0.data()[j];
            for i in 0..3 {
                acc += x[i] * w0.at(i, j);
            }
            h[j] = acc.max(0.0);
        }
        for j in 0..2 {
            let mut acc = b1.data()[j];
            for i in 0..4 {
                acc += h[i] * w1.at(i, j);
            }
            assert_abs_diff_eq!(got[j], acc, epsilon = 1e-12);
        }
    }

    fn unit_with_store(dim: usize, seed: u64) -> (AttentionUnit, ParamStore) {
        let unit = AttentionUnit::new("att", dim, AttentionRead::Position);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        unit.init(&mut store, &mut rng).unwrap();
        (unit, store)
    }

    #[test]
    fn singleton_sequence_returns_value_projection() {
        let (unit, mut store) = unit_with_store(3, 2);
        let t = Tensor::new(vec![2, 3], vec![0.4, -1.0, 2.0, 0.0, 0.5, -0.5]).unwrap();
        let mut cx = ForwardCtx::new(&mut store, Mode::Eval, 0);
        let tid = cx.input(&t).unwrap();
        let out = unit.forward(&mut cx, tid, None).unwrap();
        let wv = cx.param("att.wv.w").unwrap();
        let want = cx.graph.matmul(tid, wv).unwrap();
        let wv_vals = cx.graph.value(want).to_vec();
        for (a, b) in cx.graph.value(out.output).iter().zip(&wv_vals) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        // Softmax over a single score is exactly 1.
        assert_eq!(cx.graph.value(out.rows[0]), &[1.0, 1.0]);
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let (unit, mut store) = unit_with_store(3, 4);
        let u = Tensor::new(vec![1, 3], vec![0.7, -0.2, 0.9]).unwrap();
        let mut cx = ForwardCtx::new(&mut store, Mode::Eval, 0);
        let a = cx.input(&u).unwrap();
        let b = cx.input(&u).unwrap();
        let out = unit.forward(&mut cx, a, Some(b)).unwrap();
        let row = cx.graph.value(out.rows[0]);
        assert_abs_diff_eq!(row[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(row[1], 0.5, epsilon = 1e-12);
        // Both value rows are identical, so the output equals W_V u.
        let wv = cx.param("att.wv.w").unwrap();
        let proj = cx.graph.matmul(a, wv).unwrap();
        let want = cx.graph.value(proj).to_vec();
        for (x, y) in cx.graph.value(out.output).iter().zip(&want) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_token_case_matches_manual_attention() {
        let dim = 2;
        let (unit, mut store) = unit_with_store(dim, 6);
        // Hand-picked weights.
        store
            .get_mut("att.wq.w")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[1.0, 0.5, -0.5, 1.0]);
        store
            .get_mut("att.wk.w")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.3, -1.0, 0.8, 0.2]);
        store
            .get_mut("att.wv.w")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[2.0, 0.0, 0.0, -1.0]);
        let t = [0.6, -0.4];
        let a_prev = [-0.1, 0.9];

        let matvec = |w: &[f64], x: &[f64]| -> Vec<f64> {
            // x (row) * W for W stored row-major [in, out]
            vec![
                x[0] * w[0] + x[1] * w[2],
                x[0] * w[1] + x[1] * w[3],
            ]
        };
        let wq = [1.0, 0.5, -0.5, 1.0];
        let wk = [0.3, -1.0, 0.8, 0.2];
        let wv = [2.0, 0.0, 0.0, -1.0];
        let q0 = matvec(&wq, &t);
        let k0 = matvec(&wk, &t);
        let k1 = matvec(&wk, &a_prev);
        let v0 = matvec(&wv, &t);
        let v1 = matvec(&wv, &a_prev);
        let scale = 1.0 / (dim as f64).sqrt();
        let s0 = (q0[0] * k0[0] + q0[1] * k0[1]) * scale;
        let s1 = (q0[0] * k1[0] + q0[1] * k1[1]) * scale;
        let m = s0.max(s1);
        let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
        let z = e0 + e1;
        let (w0, w1) = (e0 / z, e1 / z);
        let want = [w0 * v0[0] + w1 * v1[0], w0 * v0[1] + w1 * v1[1]];

        let mut cx = ForwardCtx::new(&mut store, Mode::Eval, 0);
        let tid = cx.input(&Tensor::new(vec![1, 2], t.to_vec()).unwrap()).unwrap();
        let pid = cx.input(&Tensor::new(vec![1, 2], a_prev.to_vec()).unwrap()).unwrap();
        let out = unit.forward(&mut cx, tid, Some(pid)).unwrap();
        let got = cx.graph.value(out.output);
        assert_abs_diff_eq!(got[0], want[0], epsilon = 1e-12);
        assert_abs_diff_eq!(got[1], want[1], epsilon = 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (unit, mut store) = unit_with_store(4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Tensor::new(vec![8, 4], (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let p = Tensor::new(vec![8, 4], (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let mut cx = ForwardCtx::new(&mut store, Mode::Eval, 0);
        let tid = cx.input(&t).unwrap();
        let pid = cx.input(&p).unwrap();
        let out = unit.forward(&mut cx, tid, Some(pid)).unwrap();
        for row in out.rows {
            let vals = cx.graph.value(row);
            let [r, c] = cx.graph.shape(row);
            for i in 0..r {
                let s: f64 = vals[i * c..(i + 1) * c].iter().sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn head_with_zero_weights_outputs_half() {
        let head = ProbabilityHead::new("head", 3);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        head.init(&mut store, &mut rng).unwrap();
        for name in store.trainable_names() {
            for v in store.get_mut(&name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let mut cx = ForwardCtx::new(&mut store, Mode::Eval, 0);
        let x = cx.input(&Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap()).unwrap();
        let p = head.forward(&mut cx, x).unwrap();
        for &v in cx.graph.value(p) {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn head_saturates_on_large_logit() {
        let head = ProbabilityHead::new("head", 1);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        head.init(&mut store, &mut rng).unwrap();
        store.get_mut("head.w").unwrap().data_mut()[0] = 20.0;
        store.get_mut("head.b").unwrap().data_mut()[0] = 0.0;
        let mut cx = ForwardCtx::new(&mut store, Mode::Eval, 0);
        let x = cx.input(&Tensor::scalar(1.0)).unwrap();
        let p = head.forward(&mut cx, x).unwrap();
        assert!(cx.graph.value(p)[0] > 0.999999);
    }

    #[test]
    fn head_matches_sigmoid_affine_oracle() {
        let head = ProbabilityHead::new("head", 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        head.init(&mut store, &mut rng).unwrap();
        let w = store.get("head.w").unwrap().data().to_vec();
        let b = store.get("head.b").unwrap().data()[0];
        let x = [0.7, -1.3];
        let logit = x[0] * w[0] + x[1] * w[1] + b;
        let want = 1.0 / (1.0 + (-logit).exp());
        let mut cx = ForwardCtx::new(&mut store, Mode::Eval, 0);
        let xid = cx.input(&Tensor::new(vec![1, 2], x.to_vec()).unwrap()).unwrap();
        let p = head.forward(&mut cx, xid).unwrap();
        assert_abs_diff_eq!(cx.graph.value(p)[0], want, epsilon = 1e-15);
    }
}
