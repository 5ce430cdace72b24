//! The assembled multi-task ranking model: feature input through the
//! extraction bottom, per-task towers, optional attention transfer,
//! probability heads, and optional funnel probability transfer.
//!
//! Component toggles reproduce each ablation variant, from a plain
//! shared-bottom MTL network up to the full architecture, plus the
//! three-independent-networks single-task baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, NodeId, Tensor};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::extraction::{Stage1, Stage2};
use crate::heads::{AttentionUnit, ProbabilityHead, Tower, TransferredOutputs};
use crate::nn::{ForwardCtx, Mlp, ParamStore};
use crate::objective::{self, LossConfig};

pub const TASKS: usize = 3;
pub const TASK_NAMES: [&str; TASKS] = ["click", "atc", "purchase"];

enum Bottom {
    /// Plain shared trunk (shared-bottom MTL).
    Trunk(Mlp),
    /// Two-stage extraction with shared and task-specific experts.
    TwoStage { stage1: Stage1, stage2: Stage2 },
}

struct SingleNet {
    trunk: Mlp,
    tower: Tower,
    head: ProbabilityHead,
}

enum Architecture {
    Multi {
        bottom: Bottom,
        towers: Vec<Tower>,
        attention: Option<Vec<AttentionUnit>>,
        heads: Vec<ProbabilityHead>,
    },
    Single(Vec<SingleNet>),
}

/// Node handles produced by one forward pass.
pub struct ForwardPass {
    /// Per-task conditional probabilities p̂ (ctr, avr, cvr).
    pub conditional: [NodeId; TASKS],
    /// Final per-task outputs ŷ; equals `conditional` when probability
    /// transfer is off.
    pub outputs: [NodeId; TASKS],
    /// Gate softmax matrices from both extraction stages.
    pub gate_rows: Vec<NodeId>,
    /// Attention softmax rows from every unit.
    pub attention_rows: Vec<NodeId>,
}

pub struct MlprModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    arch: Architecture,
}

impl MlprModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let input_dim = config.input_dim();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);

        let arch = if config.toggles.single_task {
            let mut nets = Vec::with_capacity(TASKS);
            for (k, task) in TASK_NAMES.iter().enumerate() {
                let trunk = Mlp::expert(
                    format!("single.{task}.trunk"),
                    input_dim,
                    &config.expert_hidden,
                    config.dropout,
                );
                let tower = Tower::new(
                    &format!("single.{task}.tower"),
                    trunk.out_dim(),
                    &config.tower_hidden,
                    config.tower_dim,
                );
                let head = ProbabilityHead::new(&format!("single.{task}.head"), config.tower_dim);
                trunk.init(&mut store, &mut rng)?;
                tower.init(&mut store, &mut rng)?;
                head.init(&mut store, &mut rng)?;
                let _ = k;
                nets.push(SingleNet { trunk, tower, head });
            }
            Architecture::Single(nets)
        } else {
            let bottom = if config.toggles.specific_experts {
                let stage1 = Stage1::new(
                    "stage1",
                    input_dim,
                    &config.expert_hidden,
                    config.dropout,
                    config.stages.stage1_experts,
                    TASKS,
                );
                let stage2 = Stage2::new(
                    "stage2",
                    stage1.out_dim(),
                    &config.expert_hidden,
                    config.dropout,
                    config.stages.stage2_shared,
                    config.stages.stage2_specific,
                    TASKS,
                );
                stage1.init(&mut store, &mut rng)?;
                stage2.init(&mut store, &mut rng)?;
                Bottom::TwoStage { stage1, stage2 }
            } else {
                let trunk = Mlp::expert(
                    "bottom.trunk",
                    input_dim,
                    &config.expert_hidden,
                    config.dropout,
                );
                trunk.init(&mut store, &mut rng)?;
                Bottom::Trunk(trunk)
            };
            let bottom_dim = match &bottom {
                Bottom::Trunk(t) => t.out_dim(),
                Bottom::TwoStage { stage2, .. } => stage2.out_dim(),
            };
            let towers: Vec<Tower> = TASK_NAMES
                .iter()
                .map(|task| {
                    Tower::new(
                        &format!("tower.{task}"),
                        bottom_dim,
                        &config.tower_hidden,
                        config.tower_dim,
                    )
                })
                .collect();
            for tower in &towers {
                tower.init(&mut store, &mut rng)?;
            }
            let attention = if config.toggles.attention_units {
                let units: Vec<AttentionUnit> = TASK_NAMES
                    .iter()
                    .map(|task| {
                        AttentionUnit::new(
                            format!("attention.{task}"),
                            config.tower_dim,
                            config.attention_read,
                        )
                    })
                    .collect();
                for unit in &units {
                    unit.init(&mut store, &mut rng)?;
                }
                Some(units)
            } else {
                None
            };
            let heads: Vec<ProbabilityHead> = TASK_NAMES
                .iter()
                .map(|task| ProbabilityHead::new(&format!("head.{task}"), config.tower_dim))
                .collect();
            for head in &heads {
                head.init(&mut store, &mut rng)?;
            }
            Architecture::Multi {
                bottom,
                towers,
                attention,
                heads,
            }
        };

        if config.toggles.uncertainty_loss {
            objective::init_uncertainty_params(&mut store)?;
        }

        Ok(MlprModel {
            config,
            store,
            arch,
        })
    }

    /// Runs one forward pass, returning the recording context (the graph
    /// keeps growing if losses are attached) and the output node handles.
    pub fn forward_on(
        &mut self,
        x: &Tensor,
        mode: Mode,
        rng_seed: u64,
    ) -> Result<(ForwardCtx<'_>, ForwardPass)> {
        if x.cols() != self.config.input_dim() {
            return Err(Error::dimension(
                "model",
                format!(
                    "input width {} vs configured feature length {}",
                    x.cols(),
                    self.config.input_dim()
                ),
            ));
        }
        let transfer = self.config.toggles.probability_transfer;
        let mut cx = ForwardCtx::new(&mut self.store, mode, rng_seed);
        let xid = cx.input(x)?;

        let pass = match &self.arch {
            Architecture::Single(nets) => {
                let mut conditional = Vec::with_capacity(TASKS);
                for net in nets {
                    let h = net.trunk.forward(&mut cx, xid)?;
                    let t = net.tower.forward(&mut cx, h)?;
                    conditional.push(net.head.forward(&mut cx, t)?);
                }
                let conditional: [NodeId; TASKS] =
                    conditional.try_into().expect("three tasks");
                ForwardPass {
                    conditional,
                    outputs: conditional,
                    gate_rows: Vec::new(),
                    attention_rows: Vec::new(),
                }
            }
            Architecture::Multi {
                bottom,
                towers,
                attention,
                heads,
            } => {
                let mut gate_rows = Vec::new();
                let per_task: Vec<NodeId> = match bottom {
                    Bottom::Trunk(trunk) => {
                        let shared = trunk.forward(&mut cx, xid)?;
                        vec![shared; TASKS]
                    }
                    Bottom::TwoStage { stage1, stage2 } => {
                        let s1 = stage1.forward(&mut cx, xid)?;
                        gate_rows.extend(s1.gate_weights.iter().copied());
                        let s2 = stage2.forward(&mut cx, &s1.per_task)?;
                        gate_rows.extend(s2.gate_weights.iter().copied());
                        s2.per_task
                    }
                };

                let mut tower_out = Vec::with_capacity(TASKS);
                for (tower, &v) in towers.iter().zip(&per_task) {
                    tower_out.push(tower.forward(&mut cx, v)?);
                }

                let mut attention_rows = Vec::new();
                let task_repr: Vec<NodeId> = match attention {
                    None => tower_out.clone(),
                    Some(units) => {
                        let mut out = Vec::with_capacity(TASKS);
                        let mut prev: Option<NodeId> = None;
                        for (unit, &t) in units.iter().zip(&tower_out) {
                            let att = unit.forward(&mut cx, t, prev)?;
                            attention_rows.extend(att.rows.iter().copied());
                            out.push(att.output);
                            prev = Some(att.output);
                        }
                        out
                    }
                };

                let mut conditional = Vec::with_capacity(TASKS);
                for (head, &h) in heads.iter().zip(&task_repr) {
                    conditional.push(head.forward(&mut cx, h)?);
                }
                let conditional: [NodeId; TASKS] =
                    conditional.try_into().expect("three tasks");
                let outputs = if transfer {
                    crate::heads::transfer_nodes(
                        &mut cx,
                        conditional[0],
                        conditional[1],
                        conditional[2],
                    )?
                } else {
                    conditional
                };
                ForwardPass {
                    conditional,
                    outputs,
                    gate_rows,
                    attention_rows,
                }
            }
        };
        Ok((cx, pass))
    }

    /// Eval-mode scoring: final per-task outputs for each row of `x`.
    pub fn predict(&mut self, x: &Tensor) -> Result<Vec<TransferredOutputs>> {
        let rows = x.rows();
        let (cx, pass) = self.forward_on(x, Mode::Eval, 0)?;
        let mut out = Vec::with_capacity(rows);
        let click = cx.graph.value(pass.outputs[0]).to_vec();
        let atc = cx.graph.value(pass.outputs[1]).to_vec();
        let purchase = cx.graph.value(pass.outputs[2]).to_vec();
        for i in 0..rows {
            out.push(TransferredOutputs {
                click: click[i],
                atc: atc[i],
                purchase: purchase[i],
            });
        }
        Ok(out)
    }

    /// Names of every trainable parameter, for structural checks.
    pub fn parameter_names(&self) -> Vec<String> {
        self.store.trainable_names()
    }

    /// Parameter-name prefixes of one task's stage-2 specific experts.
    pub fn specific_expert_params(&self, task: usize) -> Vec<String> {
        match &self.arch {
            Architecture::Multi {
                bottom: Bottom::TwoStage { stage2, .. },
                ..
            } => stage2.specific_param_names(task, &self.store),
            _ => Vec::new(),
        }
    }

    /// Parameter names of the stage-2 shared experts.
    pub fn shared_expert_params(&self) -> Vec<String> {
        match &self.arch {
            Architecture::Multi {
                bottom: Bottom::TwoStage { stage2, .. },
                ..
            } => stage2.shared_param_names(&self.store),
            _ => Vec::new(),
        }
    }

    /// Parameter names of one task's tower.
    pub fn tower_params(&self, task: usize) -> Vec<String> {
        let prefix = match &self.arch {
            Architecture::Multi { .. } => format!("tower.{}.", TASK_NAMES[task]),
            Architecture::Single(_) => format!("single.{}.tower.", TASK_NAMES[task]),
        };
        self.store
            .trainable_names()
            .into_iter()
            .filter(|n| n.starts_with(&prefix))
            .collect()
    }
}

/// Per-task binary cross-entropy losses on the final outputs plus their
/// configured combination. `labels[k]` is a `[B, 1]` column of {0, 1};
/// `sample_weights`, when present, weight each row (impression counts).
pub fn attach_losses(
    cx: &mut ForwardCtx,
    pass: &ForwardPass,
    labels: &[Tensor; TASKS],
    sample_weights: Option<&[f64]>,
    loss_config: &LossConfig,
) -> Result<(NodeId, [NodeId; TASKS])> {
    let mut per_task = Vec::with_capacity(TASKS);
    for k in 0..TASKS {
        per_task.push(objective::bce_loss(
            &mut cx.graph,
            pass.outputs[k],
            &labels[k],
            sample_weights,
        )?);
    }
    let per_task: [NodeId; TASKS] = per_task.try_into().expect("three tasks");
    let total = objective::combine(cx, per_task, loss_config)?;
    Ok((total, per_task))
}

/// Tiny full-architecture preset (4-dim embeddings, width-8 experts) used
/// by the end-to-end gradient check.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        toggles: crate::config::Toggles::all_multi_task(),
        embedding: crate::features::EmbeddingConfig::HashEncoder { dim: 4, seed: 5 },
        feature_count: 3,
        expert_hidden: vec![8],
        stages: crate::extraction::StageConfig {
            stage1_experts: 2,
            stage2_shared: 1,
            stage2_specific: 1,
        },
        tower_hidden: vec![8],
        tower_dim: 4,
        dropout: 0.2,
        init_seed: 11,
        ..ModelConfig::default()
    }
}

/// Max relative error between the analytic gradient of the full tiny-model
/// loss and central differences over every trainable parameter (batch 4,
/// h = 1e-5). Exercises the whole stack: extraction stages, attention
/// chain, probability transfer, and the uncertainty objective.
pub fn end_to_end_fd_error() -> Result<f64> {
    use rand::Rng;
    let mut model = MlprModel::new(gradcheck_config())?;
    let cols = model.config.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::new(
        vec![4, cols],
        (0..4 * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let mut label_rng = ChaCha8Rng::seed_from_u64(13);
    let mut columns: [Vec<f64>; TASKS] = [Vec::new(), Vec::new(), Vec::new()];
    for _ in 0..4 {
        let c = label_rng.gen_bool(0.5);
        let a = c && label_rng.gen_bool(0.5);
        let p = a && label_rng.gen_bool(0.5);
        columns[0].push(c as u8 as f64);
        columns[1].push(a as u8 as f64);
        columns[2].push(p as u8 as f64);
    }
    let [c0, c1, c2] = columns;
    let labels = [Tensor::column(c0), Tensor::column(c1), Tensor::column(c2)];
    let loss_config = model.config.loss_config();
    let seed = 99u64;

    let (mut cx, pass) = model.forward_on(&x, Mode::Train, seed)?;
    let (total, _) = attach_losses(&mut cx, &pass, &labels, None, &loss_config)?;
    let grads = cx.graph.backward(total)?;
    let graph = cx.into_graph();
    model.store.apply_gradients(&graph, &grads)?;
    let analytic = model.store.flatten_gradients();

    let point = model.store.flatten_trainable();
    let fd = crate::autodiff::gradcheck::central_difference(
        |params| {
            model.store.unflatten_trainable(params)?;
            let (mut cx, pass) = model.forward_on(&x, Mode::Train, seed)?;
            let (total, _) = attach_losses(&mut cx, &pass, &labels, None, &loss_config)?;
            Ok(cx.graph.value(total)[0])
        },
        &point,
        1e-5,
    )?;
    Ok(crate::autodiff::gradcheck::max_relative_error(&analytic, &fd))
}

/// Small architecture for fast structural tests.
#[cfg(test)]
pub(crate) fn tiny_config(toggles: crate::config::Toggles) -> ModelConfig {
    ModelConfig {
        toggles,
        ..gradcheck_config()
    }
}
