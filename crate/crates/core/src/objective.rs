//! Training objective: per-task entire-space binary cross-entropy, fixed and
//! homoscedastic-uncertainty loss combination, and the Adam update rule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, ParamStore};

/// Probability clamp applied inside the loss so log never sees 0 or 1.
pub const BCE_CLAMP: f64 = 1e-12;

/// How the three task losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Linear combination with fixed weights.
    Fixed,
    /// Homoscedastic-uncertainty weighting with trainable log-variances.
    Uncertainty,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Weights for fixed mode; must be nonnegative.
    pub fixed_weights: [f64; 3],
    /// Weight samples by impression count instead of uniformly.
    pub impression_weighting: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::Uncertainty,
            fixed_weights: [1.0 / 3.0; 3],
            impression_weighting: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fixed_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Contract("fixed loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Name of the trainable log-variance scalar for task `k`.
pub fn uncertainty_param_name(task: usize) -> String {
    format!("loss.s{task}")
}

/// Registers the three s_k = log sigma_k^2 scalars (init 0).
pub fn init_uncertainty_params(store: &mut ParamStore) -> Result<()> {
    for k in 0..3 {
        store.insert(&uncertainty_param_name(k), Tensor::scalar(0.0), true)?;
    }
    Ok(())
}

/// Mean binary cross-entropy of predictions against {0,1} labels, with the
/// predictions clamped to [1e-12, 1-1e-12]. With `weights` given, the mean
/// becomes a normalized weighted sum (used for impression weighting).
pub fn bce_loss(
    graph: &mut Graph,
    predictions: NodeId,
    labels: &Tensor,
    weights: Option<&[f64]>,
) -> Result<NodeId> {
    let shape = graph.shape(predictions);
    if shape != [labels.rows(), labels.cols()] {
        return Err(Error::dimension(
            "bce_loss",
            format!("predictions {:?} vs labels {:?}", shape, labels.shape()),
        ));
    }
    if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract("bce labels must be binary".into()));
    }
    let n = labels.len();
    let y = graph.input(labels)?;
    let ones = graph.input(&Tensor::filled(vec![shape[0], shape[1]], 1.0))?;

    let p = graph.clamp(predictions, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let log_p = graph.log(p)?;
    let neg_p = graph.scale(p, -1.0)?;
    let one_minus_p = graph.add(neg_p, ones)?;
    let log_1mp = graph.log(one_minus_p)?;
    let neg_y = graph.scale(y, -1.0)?;
    let one_minus_y = graph.add(neg_y, ones)?;

    let pos = graph.mul(y, log_p)?;
    let neg = graph.mul(one_minus_y, log_1mp)?;
    let sum = graph.add(pos, neg)?;
    let nll = graph.scale(sum, -1.0)?;

    match weights {
        None => graph.mean(nll),
        Some(w) => {
            if w.len() != n {
                return Err(Error::dimension(
                    "bce_loss",
                    format!("{} weights for {} samples", w.len(), n),
                ));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::Contract("sample weights must sum to > 0".into()));
            }
            let norm: Vec<f64> = w.iter().map(|&v| v / total).collect();
            let wt = graph.input(&Tensor::new(vec![shape[0], shape[1]], norm)?)?;
            let weighted = graph.mul(nll, wt)?;
            let m = graph.mean(weighted)?;
            graph.scale(m, n as f64)
        }
    }
}

/// Fixed-weight combination: sum_k w_k * L_k.
pub fn combine_fixed(graph: &mut Graph, losses: [NodeId; 3], weights: [f64; 3]) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (l, w) in losses.into_iter().zip(weights) {
        let term = graph.scale(l, w)?;
        total = Some(match total {
            None => term,
            Some(t) => graph.add(t, term)?,
        });
    }
    Ok(total.expect("three losses"))
}

/// Uncertainty combination under s_k = log sigma_k^2:
/// sum_k [ exp(-s_k)/2 * L_k + s_k/2 ], with the s_k nodes trainable.
pub fn combine_uncertainty(
    graph: &mut Graph,
    losses: [NodeId; 3],
    s: [NodeId; 3],
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (l, sk) in losses.into_iter().zip(s) {
        let neg_s = graph.scale(sk, -1.0)?;
        let inv_var = graph.exp(neg_s)?;
        let half_inv = graph.scale(inv_var, 0.5)?;
        let weighted = graph.mul(half_inv, l)?;
        let reg = graph.scale(sk, 0.5)?;
        let term = graph.add(weighted, reg)?;
        total = Some(match total {
            None => term,
            Some(t) => graph.add(t, term)?,
        });
    }
    Ok(total.expect("three losses"))
}

/// Builds the configured combination over three per-task losses, pulling the
/// s_k parameters from the store when in uncertainty mode.
pub fn combine(
    cx: &mut ForwardCtx,
    losses: [NodeId; 3],
    config: &LossConfig,
) -> Result<NodeId> {
    match config.mode {
        LossMode::Fixed => combine_fixed(&mut cx.graph, losses, config.fixed_weights),
        LossMode::Uncertainty => {
            let s = [
                cx.param(&uncertainty_param_name(0))?,
                cx.param(&uncertainty_param_name(1))?,
                cx.param(&uncertainty_param_name(2))?,
            ];
            combine_uncertainty(&mut cx.graph, losses, s)
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub params: AdamParams,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(params: AdamParams) -> Self {
        Adam {
            params,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients held in each trainable
    /// tensor's grad buffer. Non-finite gradients abort, naming the
    /// parameter.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let AdamParams { lr, beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for name in store.trainable_names() {
            let tensor = store.get_mut(&name)?;
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::Contract(format!("parameter '{name}' has no gradient")))?
                .to_vec();
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of parameter '{name}'"),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_loss(graph: &mut Graph, v: f64) -> NodeId {
        graph.input(&Tensor::scalar(v)).unwrap()
    }

    #[test]
    fn bce_of_half_against_positive_is_ln2() {
        let mut g = Graph::new();
        let p = g.input(&Tensor::column(vec![0.5])).unwrap();
        let y = Tensor::column(vec![1.0]);
        let loss = bce_loss(&mut g, p, &y, None).unwrap();
        assert_abs_diff_eq!(g.value(loss)[0], std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn bce_of_perfect_prediction_is_tiny() {
        let mut g = Graph::new();
        let p = g.input(&Tensor::column(vec![1.0, 0.0])).unwrap();
        let y = Tensor::column(vec![1.0, 0.0]);
        let loss = bce_loss(&mut g, p, &y, None).unwrap();
        assert!(g.value(loss)[0] <= 1e-11);
    }

    #[test]
    fn bce_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 64;
        let ps: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let ys: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let oracle: f64 = ps
            .iter()
            .zip(&ys)
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / n as f64;
        let mut g = Graph::new();
        let p = g.input(&Tensor::column(ps)).unwrap();
        let loss = bce_loss(&mut g, p, &Tensor::column(ys), None).unwrap();
        assert_abs_diff_eq!(g.value(loss)[0], oracle, epsilon = 1e-12);
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let mut g = Graph::new();
        let p = g.input(&Tensor::column(vec![0.5])).unwrap();
        let y = Tensor::column(vec![0.3]);
        assert!(bce_loss(&mut g, p, &y, None).is_err());
    }

    #[test]
    fn combine_fixed_selects_and_averages() {
        let mut g = Graph::new();
        let l = [scalar_loss(&mut g, 0.7), scalar_loss(&mut g, 0.2), scalar_loss(&mut g, 0.9)];
        let sel = combine_fixed(&mut g, l, [1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(g.value(sel)[0], 0.7, epsilon = 1e-15);

        let mut g = Graph::new();
        let l = [scalar_loss(&mut g, 0.4), scalar_loss(&mut g, 0.4), scalar_loss(&mut g, 0.4)];
        let avg = combine_fixed(&mut g, l, [1.0 / 3.0; 3]).unwrap();
        assert_abs_diff_eq!(g.value(avg)[0], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn combine_fixed_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let ls: [f64; 3] = [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)];
            let ws: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let mut g = Graph::new();
            let nodes = [scalar_loss(&mut g, ls[0]), scalar_loss(&mut g, ls[1]), scalar_loss(&mut g, ls[2])];
            let out = combine_fixed(&mut g, nodes, ws).unwrap();
            let oracle: f64 = ls.iter().zip(&ws).map(|(l, w)| l * w).sum();
            assert_abs_diff_eq!(g.value(out)[0], oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn uncertainty_at_zero_s_is_half_sum() {
        let mut g = Graph::new();
        let l = [scalar_loss(&mut g, 0.6), scalar_loss(&mut g, 0.8), scalar_loss(&mut g, 1.0)];
        let s = [scalar_loss(&mut g, 0.0), scalar_loss(&mut g, 0.0), scalar_loss(&mut g, 0.0)];
        let out = combine_uncertainty(&mut g, l, s).unwrap();
        assert_abs_diff_eq!(g.value(out)[0], (0.6 + 0.8 + 1.0) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn uncertainty_gradient_at_zero_is_one_minus_loss_over_two() {
        let lvals = [0.3, 1.0, 1.7];
        let mut g = Graph::new();
        let l = [
            scalar_loss(&mut g, lvals[0]),
            scalar_loss(&mut g, lvals[1]),
            scalar_loss(&mut g, lvals[2]),
        ];
        let s: Vec<NodeId> = (0..3)
            .map(|k| {
                g.param(&format!("s{k}"), &Tensor::scalar(0.0).with_requires_grad())
                    .unwrap()
            })
            .collect();
        let out = combine_uncertainty(&mut g, l, [s[0], s[1], s[2]]).unwrap();
        let grads = g.backward(out).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(grads.of(s[k], &g)[0], (1.0 - lvals[k]) / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn s_form_equals_sigma_form_of_the_paper_loss() {
        // The uncertainty objective in sigma form:
        // sum 1/(2 sigma_k^2) L_k + log(sigma_1 sigma_2 sigma_3).
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let sigmas: [f64; 3] = [
                rng.gen_range(0.3..3.0),
                rng.gen_range(0.3..3.0),
                rng.gen_range(0.3..3.0),
            ];
            let ls: [f64; 3] = [
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..2.0),
            ];
            let sigma_form: f64 = (0..3)
                .map(|k| ls[k] / (2.0 * sigmas[k] * sigmas[k]))
                .sum::<f64>()
                + (sigmas[0] * sigmas[1] * sigmas[2]).ln();

            let mut g = Graph::new();
            let l = [
                scalar_loss(&mut g, ls[0]),
                scalar_loss(&mut g, ls[1]),
                scalar_loss(&mut g, ls[2]),
            ];
            let s = [
                scalar_loss(&mut g, (sigmas[0] * sigmas[0]).ln()),
                scalar_loss(&mut g, (sigmas[1] * sigmas[1]).ln()),
                scalar_loss(&mut g, (sigmas[2] * sigmas[2]).ln()),
            ];
            let out = combine_uncertainty(&mut g, l, s).unwrap();
            assert_abs_diff_eq!(g.value(out)[0], sigma_form, epsilon = 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::column(vec![1.0, -2.0]), true).unwrap();
        store.get_mut("w").unwrap().set_grad(&[0.0, 0.0]).unwrap();
        let mut adam = Adam::new(AdamParams::default());
        adam.step(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_magnitude_is_about_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0), true).unwrap();
        store.get_mut("w").unwrap().set_grad(&[0.37]).unwrap();
        let mut adam = Adam::new(AdamParams::default());
        adam.step(&mut store).unwrap();
        let moved = 1.0 - store.get("w").unwrap().data()[0];
        assert_abs_diff_eq!(moved, 1e-3, epsilon = 1e-7);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // 100 steps on f(x) = x^2 from x = 1 with lr 0.1.
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0), true).unwrap();
        let mut adam = Adam::new(AdamParams {
            lr: 0.1,
            ..AdamParams::default()
        });
        for _ in 0..100 {
            let x = store.get("x").unwrap().data()[0];
            store.get_mut("x").unwrap().set_grad(&[2.0 * x]).unwrap();
            adam.step(&mut store).unwrap();
        }
        assert!(store.get("x").unwrap().data()[0].abs() < 0.1);
    }

    #[test]
    fn adam_aborts_on_non_finite_gradient_naming_the_parameter() {
        let mut store = ParamStore::new();
        store.insert("tower.w", Tensor::scalar(1.0), true).unwrap();
        store.get_mut("tower.w").unwrap().set_grad(&[f64::NAN]).unwrap();
        let mut adam = Adam::new(AdamParams::default());
        let err = adam.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("tower.w"));
    }

    #[test]
    fn uncertainty_with_matching_weights_equals_fixed_plus_constant() {
        // With s fixed so exp(-s_k)/2 == w_k, the uncertainty objective is
        // the fixed objective shifted by sum s_k / 2.
        let ws = [0.2, 0.5, 0.8];
        let ls = [0.9, 0.4, 1.3];
        let s: Vec<f64> = ws.iter().map(|&w: &f64| -(2.0 * w).ln()).collect();
        let mut g = Graph::new();
        let lnodes = [
            scalar_loss(&mut g, ls[0]),
            scalar_loss(&mut g, ls[1]),
            scalar_loss(&mut g, ls[2]),
        ];
        let snodes = [
            scalar_loss(&mut g, s[0]),
            scalar_loss(&mut g, s[1]),
            scalar_loss(&mut g, s[2]),
        ];
        let unc = combine_uncertainty(&mut g, lnodes, snodes).unwrap();
        let fixed: f64 = ls.iter().zip(&ws).map(|(l, w)| l * w).sum();
        let shift: f64 = s.iter().sum::<f64>() / 2.0;
        assert_abs_diff_eq!(g.value(unc)[0], fixed + shift, epsilon = 1e-12);
    }

    #[test]
    fn uncertainty_s_gradient_sign_tracks_loss_below_one() {
        // d/ds_k = (1 - exp(-s) L)/2 ... at generic s via finite differences:
        // positive iff L_k < exp(s_k).
        let mut cx_store = ParamStore::new();
        init_uncertainty_params(&mut cx_store).unwrap();
        let mut cx = ForwardCtx::new(&mut cx_store, Mode::Eval, 0);
        let l = [
            cx.graph.input(&Tensor::scalar(0.5)).unwrap(),
            cx.graph.input(&Tensor::scalar(1.5)).unwrap(),
            cx.graph.input(&Tensor::scalar(1.0)).unwrap(),
        ];
        let cfg = LossConfig {
            mode: LossMode::Uncertainty,
            ..LossConfig::default()
        };
        let out = combine(&mut cx, l, &cfg).unwrap();
        let grads = cx.graph.backward(out).unwrap();
        let g0 = grads.of(cx.param("loss.s0").unwrap(), &cx.graph)[0];
        let g1 = grads.of(cx.param("loss.s1").unwrap(), &cx.graph)[0];
        let g2 = grads.of(cx.param("loss.s2").unwrap(), &cx.graph)[0];
        assert!(g0 > 0.0); // L < 1
        assert!(g1 < 0.0); // L > 1
        assert_abs_diff_eq!(g2, 0.0, epsilon = 1e-12); // L == 1
    }
}
