//! Parameter store, initialization, and the layer building blocks shared by
//! the extraction network and the prediction heads.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, NodeId, Tensor};
use crate::error::{Error, Result};

/// Momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// A named tensor plus whether the optimizer may touch it. Batch-norm
/// running statistics live here as non-trainable entries so checkpoints
/// capture them.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// All model state, keyed by hierarchical name in insertion order.
/// Insertion order is what the checkpoint writer and optimizer iterate, so
/// runs replay bit-identically.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter '{name}'")));
        }
        let tensor = if trainable {
            tensor.with_requires_grad()
        } else {
            tensor
        };
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn n_trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(_, e)| e.tensor.len())
            .sum()
    }

    /// All trainable values flattened in insertion order; used by the
    /// end-to-end finite-difference check.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .flat_map(|(_, e)| e.tensor.data().iter().copied())
            .collect()
    }

    /// Writes a flat buffer back into the trainable tensors, in the same
    /// order `flatten_trainable` reads them.
    pub fn unflatten_trainable(&mut self, values: &[f64]) -> Result<()> {
        let mut offset = 0;
        for (_, e) in self.entries.iter_mut().filter(|(_, e)| e.trainable) {
            let len = e.tensor.len();
            if offset + len > values.len() {
                return Err(Error::Contract("flat parameter buffer too short".into()));
            }
            e.tensor
                .data_mut()
                .copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
        if offset != values.len() {
            return Err(Error::Contract(format!(
                "flat parameter buffer has {} extra values",
                values.len() - offset
            )));
        }
        Ok(())
    }

    /// Gradients of all trainable tensors flattened in insertion order.
    pub fn flatten_gradients(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .flat_map(|(_, e)| {
                e.tensor
                    .grad()
                    .expect("trainable tensors carry gradients")
                    .iter()
                    .copied()
            })
            .collect()
    }

    /// Copies accumulated gradients from a backward pass into the trainable
    /// tensors' gradient buffers (zeros for parameters the loss never
    /// reached).
    pub fn apply_gradients(
        &mut self,
        graph: &Graph,
        grads: &crate::autodiff::Gradients,
    ) -> Result<()> {
        for name in self.trainable_names() {
            let mut acc: Option<Vec<f64>> = None;
            for (pname, id) in graph.params() {
                if pname == name {
                    let g = grads.of(id, graph);
                    match acc.as_mut() {
                        None => acc = Some(g),
                        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                    }
                }
            }
            let entry = self.get_mut(&name)?;
            match acc {
                Some(g) => entry.set_grad(&g)?,
                None => entry.zero_grad(),
            }
        }
        Ok(())
    }
}

/// Per-forward context: the recording graph, the store the parameters come
/// from, the train/eval mode, and the seeded RNG that draws dropout masks.
pub struct ForwardCtx<'a> {
    pub graph: Graph,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    param_nodes: std::collections::HashMap<String, NodeId>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(store: &'a mut ParamStore, mode: Mode, rng_seed: u64) -> Self {
        ForwardCtx {
            graph: Graph::new(),
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            param_nodes: std::collections::HashMap::new(),
        }
    }

    /// Leaf node for a named parameter; memoized so reuse shares gradients.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let t = self.store.get(name)?.clone();
        let id = self.graph.param(name, &t)?;
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input(&mut self, t: &Tensor) -> Result<NodeId> {
        self.graph.input(t)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.graph.input(&t)
    }

    /// Releases the store borrow, keeping the recorded graph.
    pub fn into_graph(self) -> Graph {
        self.graph
    }
}

/// Glorot-uniform init for a weight matrix.
fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).expect("sizes match")
}

/// Affine layer descriptor; weights are `[in_dim, out_dim]` so a batch
/// `[B, in]` maps to `[B, out]` by right-multiplication.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
            bias,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        store.insert(
            &format!("{}.w", self.name),
            glorot(rng, self.in_dim, self.out_dim),
            true,
        )?;
        if self.bias {
            store.insert(
                &format!("{}.b", self.name),
                Tensor::zeros(vec![1, self.out_dim]),
                true,
            )?;
        }
        Ok(())
    }

    /// Zero-initialized variant; gate layers start uniform this way.
    pub fn init_zero(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(
            &format!("{}.w", self.name),
            Tensor::zeros(vec![self.in_dim, self.out_dim]),
            true,
        )?;
        if self.bias {
            store.insert(
                &format!("{}.b", self.name),
                Tensor::zeros(vec![1, self.out_dim]),
                true,
            )?;
        }
        Ok(())
    }

    pub fn forward(&self, cx: &mut ForwardCtx, x: NodeId) -> Result<NodeId> {
        let w = cx.param(&format!("{}.w", self.name))?;
        let mut out = cx.graph.matmul(x, w)?;
        if self.bias {
            let b = cx.param(&format!("{}.b", self.name))?;
            out = cx.graph.add(out, b)?;
        }
        Ok(out)
    }
}

/// Batch normalization with learned scale/shift and running statistics
/// (momentum 0.9, eps 1e-5). Train mode normalizes with batch moments and
/// folds them into the running buffers; eval mode uses the running buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        BatchNorm { name: name.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(
            &format!("{}.gamma", self.name),
            Tensor::filled(vec![1, self.dim], 1.0),
            true,
        )?;
        store.insert(
            &format!("{}.beta", self.name),
            Tensor::zeros(vec![1, self.dim]),
            true,
        )?;
        store.insert(
            &format!("{}.running_mean", self.name),
            Tensor::zeros(vec![1, self.dim]),
            false,
        )?;
        store.insert(
            &format!("{}.running_var", self.name),
            Tensor::filled(vec![1, self.dim], 1.0),
            false,
        )?;
        Ok(())
    }

    pub fn forward(&self, cx: &mut ForwardCtx, x: NodeId) -> Result<NodeId> {
        let gamma = cx.param(&format!("{}.gamma", self.name))?;
        let beta = cx.param(&format!("{}.beta", self.name))?;
        match cx.mode {
            Mode::Train => {
                let (out, mean, var) = cx.graph.batch_norm_train(x, gamma, beta)?;
                for (suffix, batch) in [("running_mean", &mean), ("running_var", &var)] {
                    let t = cx.store.get_mut(&format!("{}.{}", self.name, suffix))?;
                    for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                }
                Ok(out)
            }
            Mode::Eval => {
                let mean = cx.store.get(&format!("{}.running_mean", self.name))?.data().to_vec();
                let var = cx.store.get(&format!("{}.running_var", self.name))?.data().to_vec();
                cx.graph.batch_norm_eval(x, gamma, beta, &mean, &var)
            }
        }
    }
}

/// Feed-forward block stack: Linear -> BatchNorm -> ReLU -> Dropout per
/// hidden size, which is the expert-network shape. The tower variant skips
/// batch norm and dropout.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub layers: Vec<Linear>,
    pub norms: Vec<Option<BatchNorm>>,
    pub dropout: f64,
    /// Apply ReLU after the final layer too (experts do, towers don't).
    pub activate_last: bool,
}

impl Mlp {
    /// Expert-style MLP: every layer gets batch norm + ReLU + dropout.
    pub fn expert(name: impl Into<String>, in_dim: usize, hidden: &[usize], dropout: f64) -> Self {
        let name = name.into();
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut prev = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(format!("{name}.l{i}"), prev, h, true));
            norms.push(Some(BatchNorm::new(format!("{name}.l{i}.bn"), h)));
            prev = h;
        }
        Mlp {
            name,
            layers,
            norms,
            dropout,
            activate_last: true,
        }
    }

    /// Tower-style MLP: plain Linear + ReLU hidden layers, affine output.
    pub fn tower(name: impl Into<String>, in_dim: usize, hidden: &[usize], out_dim: usize) -> Self {
        let name = name.into();
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut prev = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(format!("{name}.l{i}"), prev, h, true));
            norms.push(None);
            prev = h;
        }
        layers.push(Linear::new(format!("{name}.out"), prev, out_dim, true));
        norms.push(None);
        Mlp {
            name,
            layers,
            norms,
            dropout: 0.0,
            activate_last: false,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").out_dim
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for (layer, norm) in self.layers.iter().zip(&self.norms) {
            layer.init(store, rng)?;
            if let Some(bn) = norm {
                bn.init(store)?;
            }
        }
        Ok(())
    }

    pub fn forward(&self, cx: &mut ForwardCtx, x: NodeId) -> Result<NodeId> {
        let n = self.layers.len();
        let mut h = x;
        for (i, (layer, norm)) in self.layers.iter().zip(&self.norms).enumerate() {
            h = layer.forward(cx, h)?;
            if let Some(bn) = norm {
                h = bn.forward(cx, h)?;
            }
            let last = i + 1 == n;
            if !last || self.activate_last {
                h = cx.graph.relu(h)?;
                if self.dropout > 0.0 {
                    let mode = cx.mode;
                    let ratio = self.dropout;
                    let mut rng = cx.rng.clone();
                    h = cx.graph.dropout(h, ratio, mode, &mut rng)?;
                    cx.rng = rng;
                }
            }
        }
        Ok(h)
    }
}
