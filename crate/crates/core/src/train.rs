//! Mini-batch training loop: seeded shuffling, Adam updates, a CSV step
//! log, and early stopping on validation total loss.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tensor};
use crate::config::TrainConfig;
use crate::data::EngagementRecord;
use crate::error::{Error, Result};
use crate::model::{attach_losses, MlprModel, TASKS};
use crate::nn::ParamStore;
use crate::objective::{self, Adam, LossMode};
use crate::pipeline::{targets, FeaturePipeline};

/// One optimizer step's log line.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss_click: f64,
    pub loss_atc: f64,
    pub loss_purchase: f64,
    pub total: f64,
    pub s: [f64; 3],
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub steps_run: u64,
    pub stopped_early: bool,
    pub hit_target: bool,
}

/// Dataset prepared for the loop: stacked features and per-task labels.
pub struct PreparedData {
    pub x: Tensor,
    pub labels: [Tensor; TASKS],
    pub weights: Option<Vec<f64>>,
}

pub fn prepare(
    pipeline: &FeaturePipeline,
    records: &[EngagementRecord],
    impression_weighting: bool,
) -> Result<PreparedData> {
    let x = pipeline.batch(records)?;
    let t = targets(records, impression_weighting);
    Ok(PreparedData {
        x,
        labels: t.labels,
        weights: t.weights,
    })
}

fn slice_rows(data: &PreparedData, rows: &[usize]) -> (Tensor, [Tensor; TASKS], Option<Vec<f64>>) {
    let width = data.x.cols();
    let mut xb = Vec::with_capacity(rows.len() * width);
    let mut labels: [Vec<f64>; TASKS] = [Vec::new(), Vec::new(), Vec::new()];
    let mut weights = data.weights.as_ref().map(|_| Vec::with_capacity(rows.len()));
    for &i in rows {
        xb.extend_from_slice(&data.x.data()[i * width..(i + 1) * width]);
        for (k, l) in labels.iter_mut().enumerate() {
            l.push(data.labels[k].data()[i]);
        }
        if let (Some(w), Some(src)) = (weights.as_mut(), data.weights.as_ref()) {
            w.push(src[i]);
        }
    }
    let [l0, l1, l2] = labels;
    (
        Tensor::new(vec![rows.len(), width], xb).expect("sizes match"),
        [Tensor::column(l0), Tensor::column(l1), Tensor::column(l2)],
        weights,
    )
}

/// Total loss over a dataset in eval mode (no dropout, running batch-norm
/// statistics), computed in batches.
pub fn evaluate_loss(model: &mut MlprModel, data: &PreparedData, batch_size: usize) -> Result<f64> {
    let loss_config = model.config.loss_config();
    let n = data.x.rows();
    if n == 0 {
        return Err(Error::Contract("evaluate_loss on an empty dataset".into()));
    }
    let mut total = 0.0;
    let mut seen = 0usize;
    let index: Vec<usize> = (0..n).collect();
    for chunk in index.chunks(batch_size.max(1)) {
        let (x, labels, weights) = slice_rows(data, chunk);
        let (mut cx, pass) = model.forward_on(&x, Mode::Eval, 0)?;
        let (total_node, _) =
            attach_losses(&mut cx, &pass, &labels, weights.as_deref(), &loss_config)?;
        total += cx.graph.value(total_node)[0] * chunk.len() as f64;
        seen += chunk.len();
    }
    Ok(total / seen as f64)
}

fn current_s(store: &ParamStore, mode: LossMode) -> [f64; 3] {
    match mode {
        LossMode::Fixed => [0.0; 3],
        LossMode::Uncertainty => {
            let mut s = [0.0; 3];
            for (k, slot) in s.iter_mut().enumerate() {
                if let Ok(t) = store.get(&objective::uncertainty_param_name(k)) {
                    *slot = t.data()[0];
                }
            }
            s
        }
    }
}

/// Trains the model in place. On a non-finite loss or gradient the best
/// parameters seen so far are restored before the error is returned, so the
/// caller can still write a last-good checkpoint.
pub fn train(
    model: &mut MlprModel,
    train_data: &PreparedData,
    val_data: Option<&PreparedData>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let n = train_data.x.rows();
    if n == 0 {
        return Err(Error::Contract("training set is empty".into()));
    }
    if config.batch_size < 2 {
        return Err(Error::Contract(
            "batch size must be >= 2 (batch norm needs it)".into(),
        ));
    }
    let loss_config = model.config.loss_config();
    let mut adam = Adam::new(config.optimizer);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut epochs_without_improvement = 0usize;
    let mut step: u64 = 0;
    let mut stopped_early = false;
    let mut hit_target = false;

    let restore_best = |model: &mut MlprModel, best: &Option<(f64, ParamStore)>| {
        if let Some((_, store)) = best {
            model.store = store.clone();
        }
    };

    'epochs: for epoch in 0..config.epochs {
        let mut index: Vec<usize> = (0..n).collect();
        for i in (1..index.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            index.swap(i, j);
        }
        for chunk in index.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue; // leftover single row cannot be batch-normed
            }
            let started = Instant::now();
            let (x, labels, weights) = slice_rows(train_data, chunk);
            let dropout_seed = config
                .seed
                .wrapping_add(0x5851_f42d_4c95_7f2d_u64.wrapping_mul(step + 1));
            let step_result: Result<(f64, [f64; 3])> = (|| {
                let (mut cx, pass) = model.forward_on(&x, Mode::Train, dropout_seed)?;
                let (total_node, per_task) =
                    attach_losses(&mut cx, &pass, &labels, weights.as_deref(), &loss_config)?;
                let total = cx.graph.value(total_node)[0];
                let task_losses = [
                    cx.graph.value(per_task[0])[0],
                    cx.graph.value(per_task[1])[0],
                    cx.graph.value(per_task[2])[0],
                ];
                let grads = cx.graph.backward(total_node)?;
                let graph = cx.into_graph();
                model.store.apply_gradients(&graph, &grads)?;
                Ok((total, task_losses))
            })();
            let (total, task_losses) = match step_result {
                Ok(v) => v,
                Err(e) => {
                    restore_best(model, &best);
                    return Err(e);
                }
            };
            if !total.is_finite() {
                restore_best(model, &best);
                return Err(Error::NonFinite {
                    context: format!("training loss at step {step}"),
                });
            }
            if let Err(e) = adam.step(&mut model.store) {
                restore_best(model, &best);
                return Err(e);
            }
            step += 1;
            log.push(StepLog {
                step,
                loss_click: task_losses[0],
                loss_atc: task_losses[1],
                loss_purchase: task_losses[2],
                total,
                s: current_s(&model.store, loss_config.mode),
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            if let Some(target) = config.target_loss {
                if total < target {
                    hit_target = true;
                    break 'epochs;
                }
            }
            if let Some(max_steps) = config.max_steps {
                if step >= max_steps as u64 {
                    break 'epochs;
                }
            }
        }

        // End of epoch: early stopping on validation loss.
        if let Some(val) = val_data {
            let val_loss = evaluate_loss(model, val, config.batch_size)?;
            let improved = best.as_ref().map(|(b, _)| val_loss < *b).unwrap_or(true);
            if improved {
                best = Some((val_loss, model.store.clone()));
                epochs_without_improvement = 0;
            } else {
                epochs_without_improvement += 1;
                if epochs_without_improvement >= config.patience {
                    stopped_early = true;
                    let _ = epoch;
                    break 'epochs;
                }
            }
        }
    }

    let best_val_loss = match (&best, val_data) {
        (Some((loss, _)), _) => {
            restore_best(model, &best);
            *loss
        }
        (None, Some(val)) => evaluate_loss(model, val, config.batch_size)?,
        (None, None) => log.last().map(|l| l.total).unwrap_or(f64::NAN),
    };

    Ok(TrainOutcome {
        epochs_run: (step as usize).div_ceil(n.div_ceil(config.batch_size).max(1)),
        steps_run: step,
        log,
        best_val_loss,
        stopped_early,
        hit_target,
    })
}

/// Writes the step log as CSV: step, per-task losses, total, s values,
/// wall milliseconds.
pub fn write_training_log(path: impl AsRef<std::path::Path>, log: &[StepLog]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "step,L_click,L_atc,L_purchase,total,s1,s2,s3,wall_ms")?;
    for l in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            l.step,
            l.loss_click,
            l.loss_atc,
            l.loss_purchase,
            l.total,
            l.s[0],
            l.s[1],
            l.s[2],
            l.wall_ms
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FunnelParams, Toggles};
    use crate::features::{EmbeddingConfig, EmbeddingProvider, HashEncoder};
    use crate::model::tiny_config;

    fn prepared(seed: u64) -> (PreparedData, FeaturePipeline, Vec<EngagementRecord>) {
        let records = crate::data::generate(&FunnelParams {
            n_queries: 16,
            n_items: 50,
            candidates_per_query: 8,
            feature_count: 3,
            seed,
            ..FunnelParams::default()
        })
        .unwrap();
        let provider = EmbeddingProvider::Hash(HashEncoder::new(4, 5));
        let pipeline = FeaturePipeline::fit(provider, &records).unwrap();
        let data = prepare(&pipeline, &records, false).unwrap();
        (data, pipeline, records)
    }

    fn model_for(data_feature_count: usize) -> MlprModel {
        let mut config = tiny_config(Toggles::all_multi_task());
        config.embedding = EmbeddingConfig::HashEncoder { dim: 4, seed: 5 };
        config.feature_count = data_feature_count;
        MlprModel::new(config).unwrap()
    }

    #[test]
    fn short_run_reduces_training_loss() {
        let (data, _, _) = prepared(21);
        let mut model = model_for(3);
        let before = evaluate_loss(&mut model, &data, 32).unwrap();
        let config = TrainConfig {
            batch_size: 32,
            epochs: 6,
            seed: 3,
            ..TrainConfig::default()
        };
        let outcome = train(&mut model, &data, None, &config).unwrap();
        assert!(outcome.steps_run > 0);
        let after = evaluate_loss(&mut model, &data, 32).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (data, _, _) = prepared(22);
        let run = || {
            let mut model = model_for(3);
            let config = TrainConfig {
                batch_size: 32,
                epochs: 2,
                seed: 9,
                ..TrainConfig::default()
            };
            train(&mut model, &data, None, &config).unwrap();
            model.store.flatten_trainable()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn early_stopping_restores_best_parameters() {
        let (data, _, _) = prepared(23);
        let mut model = model_for(3);
        let config = TrainConfig {
            batch_size: 32,
            epochs: 30,
            patience: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let outcome = train(&mut model, &data, Some(&data), &config).unwrap();
        // Restored parameters evaluate exactly to the reported best loss.
        let val = evaluate_loss(&mut model, &data, 32).unwrap();
        assert!((val - outcome.best_val_loss).abs() < 1e-12);
    }

    #[test]
    fn target_loss_stops_the_run() {
        let (data, _, _) = prepared(24);
        let mut model = model_for(3);
        let config = TrainConfig {
            batch_size: 32,
            epochs: 100,
            target_loss: Some(1e9), // any first step hits it
            seed: 5,
            ..TrainConfig::default()
        };
        let outcome = train(&mut model, &data, None, &config).unwrap();
        assert!(outcome.hit_target);
        assert_eq!(outcome.steps_run, 1);
    }

    #[test]
    fn step_log_is_csv_parseable() {
        let (data, _, _) = prepared(25);
        let mut model = model_for(3);
        let config = TrainConfig {
            batch_size: 32,
            epochs: 1,
            seed: 5,
            ..TrainConfig::default()
        };
        let outcome = train(&mut model, &data, None, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_training_log(&path, &outcome.log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,L_click,L_atc,L_purchase,total,s1,s2,s3,wall_ms"
        );
        for line in lines {
            assert_eq!(line.split(',').count(), 9);
            for (i, field) in line.split(',').enumerate() {
                if i == 0 {
                    field.parse::<u64>().unwrap();
                } else {
                    field.parse::<f64>().unwrap();
                }
            }
        }
    }
}
