//! Two-stage extraction bottom: a shared pool of experts behind per-task
//! gates, then per-task pools of task-specific plus shared experts behind
//! customized gates. Gates are affine + softmax; experts are batch-normed
//! ReLU MLPs.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Linear, Mlp, ParamStore};

/// Expert/gate counts for both stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    /// Experts in the stage-1 shared pool.
    pub stage1_experts: usize,
    /// Shared experts in stage 2.
    pub stage2_shared: usize,
    /// Task-specific experts per task in stage 2.
    pub stage2_specific: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            stage1_experts: 4,
            stage2_shared: 2,
            stage2_specific: 2,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_experts < 1 || self.stage2_shared < 1 || self.stage2_specific < 1 {
            return Err(Error::Contract("expert counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Weighted mix of expert outputs: sum_e w[:, e] * outs[e]. Columns of the
/// gate matrix are selected with constant one-hot vectors so each expert's
/// weight broadcasts over its output row.
fn mix_experts(cx: &mut ForwardCtx, weights: NodeId, outs: &[NodeId]) -> Result<NodeId> {
    let n = outs.len();
    debug_assert_eq!(cx.graph.shape(weights)[1], n);
    let mut total: Option<NodeId> = None;
    for (e, &out) in outs.iter().enumerate() {
        let mut onehot = vec![0.0; n];
        onehot[e] = 1.0;
        let sel = cx.constant(Tensor::new(vec![n, 1], onehot)?)?;
        let w_e = cx.graph.matmul(weights, sel)?; // [B, 1]
        let term = cx.graph.mul(out, w_e)?;
        total = Some(match total {
            None => term,
            Some(t) => cx.graph.add(t, term)?,
        });
    }
    Ok(total.expect("at least one expert"))
}

/// Per-task outputs of one extraction stage plus the gate weight matrices
/// (softmax outputs, one `[B, n_experts]` node per task) for inspection.
pub struct StageOutput {
    pub per_task: Vec<NodeId>,
    pub gate_weights: Vec<NodeId>,
}

/// Stage 1: one pool of experts shared by all tasks; each task owns a gate
/// over the pool. Every expert runs once per batch and its output node is
/// reused by every task's mix.
#[derive(Debug, Clone)]
pub struct Stage1 {
    experts: Vec<Mlp>,
    gates: Vec<Linear>,
}

impl Stage1 {
    pub fn new(
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        dropout: f64,
        n_experts: usize,
        n_tasks: usize,
    ) -> Self {
        let experts = (0..n_experts)
            .map(|e| Mlp::expert(format!("{name}.expert{e}"), in_dim, hidden, dropout))
            .collect();
        let gates = (0..n_tasks)
            .map(|k| Linear::new(format!("{name}.gate{k}"), in_dim, n_experts, true))
            .collect();
        Stage1 { experts, gates }
    }

    pub fn out_dim(&self) -> usize {
        self.experts[0].out_dim()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for expert in &self.experts {
            expert.init(store, rng)?;
        }
        for gate in &self.gates {
            gate.init_zero(store)?; // uniform mixing at step 0
        }
        Ok(())
    }

    pub fn forward(&self, cx: &mut ForwardCtx, x: NodeId) -> Result<StageOutput> {
        let expert_outs: Vec<NodeId> = self
            .experts
            .iter()
            .map(|e| e.forward(cx, x))
            .collect::<Result<_>>()?;
        let mut per_task = Vec::with_capacity(self.gates.len());
        let mut gate_weights = Vec::with_capacity(self.gates.len());
        for gate in &self.gates {
            let logits = gate.forward(cx, x)?;
            let w = cx.graph.softmax(logits)?;
            per_task.push(mix_experts(cx, w, &expert_outs)?);
            gate_weights.push(w);
        }
        Ok(StageOutput {
            per_task,
            gate_weights,
        })
    }
}

/// Stage 2: per task, a pool of its own specific experts plus the shared
/// experts, all applied to that task's stage-1 output. Pool order is
/// specific experts first, then shared. Shared experts see every task's
/// input, so they receive gradient from every task; specific experts only
/// from their own.
#[derive(Debug, Clone)]
pub struct Stage2 {
    shared: Vec<Mlp>,
    specific: Vec<Vec<Mlp>>,
    gates: Vec<Linear>,
}

impl Stage2 {
    pub fn new(
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        dropout: f64,
        n_shared: usize,
        n_specific: usize,
        n_tasks: usize,
    ) -> Self {
        let shared = (0..n_shared)
            .map(|e| Mlp::expert(format!("{name}.shared{e}"), in_dim, hidden, dropout))
            .collect();
        let specific = (0..n_tasks)
            .map(|k| {
                (0..n_specific)
                    .map(|e| {
                        Mlp::expert(format!("{name}.task{k}.specific{e}"), in_dim, hidden, dropout)
                    })
                    .collect()
            })
            .collect();
        let gates = (0..n_tasks)
            .map(|k| {
                Linear::new(
                    format!("{name}.gate{k}"),
                    in_dim,
                    n_specific + n_shared,
                    true,
                )
            })
            .collect();
        Stage2 {
            shared,
            specific,
            gates,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.shared[0].out_dim()
    }

    /// Parameter-name prefixes of task `k`'s specific experts; used by the
    /// gradient-isolation checks.
    pub fn specific_param_names(&self, task: usize, store: &ParamStore) -> Vec<String> {
        let prefixes: Vec<String> = self.specific[task].iter().map(|m| m.name.clone()).collect();
        store
            .iter()
            .filter(|(name, e)| e.trainable && prefixes.iter().any(|p| name.starts_with(p.as_str())))
            .map(|(name, _)| name.to_string())
            .collect()
    }

    pub fn shared_param_names(&self, store: &ParamStore) -> Vec<String> {
        let prefixes: Vec<String> = self.shared.iter().map(|m| m.name.clone()).collect();
        store
            .iter()
            .filter(|(name, e)| e.trainable && prefixes.iter().any(|p| name.starts_with(p.as_str())))
            .map(|(name, _)| name.to_string())
            .collect()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for expert in &self.shared {
            expert.init(store, rng)?;
        }
        for task_experts in &self.specific {
            for expert in task_experts {
                expert.init(store, rng)?;
            }
        }
        for gate in &self.gates {
            gate.init_zero(store)?;
        }
        Ok(())
    }

    /// `inputs` holds each task's stage-1 output g^k.
    pub fn forward(&self, cx: &mut ForwardCtx, inputs: &[NodeId]) -> Result<StageOutput> {
        if inputs.len() != self.gates.len() {
            return Err(Error::dimension(
                "stage2",
                format!("{} inputs for {} tasks", inputs.len(), self.gates.len()),
            ));
        }
        let mut per_task = Vec::with_capacity(inputs.len());
        let mut gate_weights = Vec::with_capacity(inputs.len());
        for (k, (&g_k, gate)) in inputs.iter().zip(&self.gates).enumerate() {
            let mut pool: Vec<NodeId> = Vec::with_capacity(self.specific[k].len() + self.shared.len());
            for expert in &self.specific[k] {
                pool.push(expert.forward(cx, g_k)?);
            }
            for expert in &self.shared {
                pool.push(expert.forward(cx, g_k)?);
            }
            let logits = gate.forward(cx, g_k)?;
            let w = cx.graph.softmax(logits)?;
            per_task.push(mix_experts(cx, w, &pool)?);
            gate_weights.push(w);
        }
        Ok(StageOutput {
            per_task,
            gate_weights,
        })
    }
}
