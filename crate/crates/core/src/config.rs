//! Serializable configuration for models, training, data generation, and
//! experiment orchestration. Field defaults reproduce the reference
//! architecture (dropout 0.2, expert hidden sizes [512, 256, 128],
//! 256-dim embeddings); the checked-in presets shrink them for desk runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::StageConfig;
use crate::features::EmbeddingConfig;
use crate::heads::AttentionRead;
use crate::objective::{AdamParams, LossConfig, LossMode};

/// Architecture component toggles; each maps onto one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Toggles {
    pub uncertainty_loss: bool,
    pub specific_experts: bool,
    pub attention_units: bool,
    pub probability_transfer: bool,
    /// Encoder-seed refresh via a supervised probe; the stand-in for text
    /// encoder fine-tuning, which is out of scope (see README).
    pub feature_refresh: bool,
    /// Three independent per-task networks with no shared parameters.
    pub single_task: bool,
}

impl Toggles {
    pub fn all_multi_task() -> Self {
        Toggles {
            uncertainty_loss: true,
            specific_experts: true,
            attention_units: true,
            probability_transfer: true,
            feature_refresh: false,
            single_task: false,
        }
    }

    /// Number of toggles that differ between two configurations.
    pub fn diff_count(&self, other: &Toggles) -> usize {
        [
            self.uncertainty_loss != other.uncertainty_loss,
            self.specific_experts != other.specific_experts,
            self.attention_units != other.attention_units,
            self.probability_transfer != other.probability_transfer,
            self.feature_refresh != other.feature_refresh,
            self.single_task != other.single_task,
        ]
        .iter()
        .filter(|&&d| d)
        .count()
    }
}

fn default_expert_hidden() -> Vec<usize> {
    vec![512, 256, 128]
}

fn default_tower_hidden() -> Vec<usize> {
    vec![64]
}

fn default_tower_dim() -> usize {
    32
}

fn default_dropout() -> f64 {
    0.2
}

fn default_feature_count() -> usize {
    32
}

fn default_embedding() -> EmbeddingConfig {
    EmbeddingConfig::HashEncoder { dim: 256, seed: 17 }
}

fn default_fixed_weights() -> [f64; 3] {
    [1.0 / 3.0; 3]
}

fn default_init_seed() -> u64 {
    42
}

/// Full model architecture description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub toggles: Toggles,
    pub embedding: EmbeddingConfig,
    /// Number of wide ranking features the dataset carries.
    pub feature_count: usize,
    pub expert_hidden: Vec<usize>,
    pub stages: StageConfig,
    pub tower_hidden: Vec<usize>,
    pub tower_dim: usize,
    pub attention_read: AttentionRead,
    pub dropout: f64,
    pub fixed_loss_weights: [f64; 3],
    pub impression_weighting: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            toggles: Toggles::all_multi_task(),
            embedding: default_embedding(),
            feature_count: default_feature_count(),
            expert_hidden: default_expert_hidden(),
            stages: StageConfig::default(),
            tower_hidden: default_tower_hidden(),
            tower_dim: default_tower_dim(),
            attention_read: AttentionRead::Position,
            dropout: default_dropout(),
            fixed_loss_weights: default_fixed_weights(),
            impression_weighting: false,
            init_seed: default_init_seed(),
        }
    }
}

impl ModelConfig {
    /// Length of the assembled feature vector this model consumes.
    pub fn input_dim(&self) -> usize {
        crate::features::FeatureVector::expected_len(self.embedding.dim(), self.feature_count)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            mode: if self.toggles.uncertainty_loss {
                LossMode::Uncertainty
            } else {
                LossMode::Fixed
            },
            fixed_weights: self.fixed_loss_weights,
            impression_weighting: self.impression_weighting,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        self.loss_config().validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Contract(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.expert_hidden.is_empty() || self.tower_dim == 0 {
            return Err(Error::Contract("empty expert stack or zero tower dim".into()));
        }
        let t = &self.toggles;
        if t.single_task
            && (t.uncertainty_loss
                || t.specific_experts
                || t.attention_units
                || t.probability_transfer)
        {
            return Err(Error::Contract(
                "single_task excludes all multi-task toggles".into(),
            ));
        }
        Ok(())
    }
}

fn default_batch_size() -> usize {
    256
}

fn default_epochs() -> usize {
    10
}

fn default_patience() -> usize {
    3
}

/// Training loop settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps across epochs (overfit preset).
    pub max_steps: Option<usize>,
    /// Stop as soon as the training total loss drops below this.
    pub target_loss: Option<f64>,
    /// Early-stopping patience in epochs on validation total loss.
    pub patience: usize,
    pub optimizer: AdamParams,
    /// Seed for batch shuffling and dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            max_steps: None,
            target_loss: None,
            patience: default_patience(),
            optimizer: AdamParams::default(),
            seed: 7,
        }
    }
}

/// Synthetic funnel generator settings. Queries and items carry topic
/// structure so both the text (deep) and ranking-feature (wide) paths are
/// informative.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FunnelParams {
    pub n_queries: usize,
    pub n_items: usize,
    pub candidates_per_query: usize,
    pub latent_dim: usize,
    pub n_topics: usize,
    /// Scale of the topic component of a latent vector.
    pub topic_strength: f64,
    /// Standard deviation of latent noise.
    pub latent_noise: f64,
    /// Fraction of a query's candidates drawn from its own topic.
    pub same_topic_fraction: f64,
    /// Per-stage link coefficients (a_k, b_k) turning relevance into the
    /// click / ATC-given-click / purchase-given-ATC probabilities.
    pub stage_coefficients: [[f64; 2]; 3],
    /// Impressions are 1 + Poisson(this mean).
    pub impression_mean: f64,
    pub feature_count: usize,
    /// Noise added to the informative ranking-feature probes.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for FunnelParams {
    fn default() -> Self {
        FunnelParams {
            n_queries: 500,
            n_items: 2000,
            candidates_per_query: 30,
            latent_dim: 8,
            n_topics: 8,
            topic_strength: 2.0,
            latent_noise: 0.4,
            same_topic_fraction: 0.35,
            stage_coefficients: [[4.5, -4.0], [4.0, -3.6], [3.5, -3.2]],
            impression_mean: 8.0,
            feature_count: default_feature_count(),
            feature_noise: 1.0,
            seed: 1234,
        }
    }
}

impl FunnelParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries < 1
            || self.n_items < 1
            || self.candidates_per_query < 1
            || self.latent_dim < 1
            || self.n_topics < 1
        {
            return Err(Error::Contract("funnel counts must be >= 1".into()));
        }
        if self.impression_mean <= 0.0 {
            return Err(Error::Contract("impression mean must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.same_topic_fraction) {
            return Err(Error::Contract("same_topic_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_impression_threshold() -> u32 {
    5
}

/// Filtering and train/validation/test split settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
    /// Records with impressions <= this are dropped before splitting.
    pub impression_threshold: u32,
    /// Split whole queries instead of individual pairs.
    pub query_disjoint: bool,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fractions: default_fractions(),
            impression_threshold: default_impression_threshold(),
            query_disjoint: false,
            seed: 99,
        }
    }
}

/// Latency benchmark settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Queries to time.
    pub n_queries: usize,
    /// Candidate items ranked per query.
    pub candidates: usize,
    /// Untimed warmup queries.
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_queries: 200,
            candidates: 100,
            warmup: 20,
        }
    }
}

/// Top-level experiment file consumed by the CLI (`--config run.json`).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: FunnelParams,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        let s: f64 = self.split.fractions.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.split.fractions.iter().any(|&f| f <= 0.0) {
            return Err(Error::Contract(format!(
                "split fractions must be positive and sum to 1, got {:?}",
                self.split.fractions
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.as_ref().display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
