//! Record-level feature pipeline: embeds query/item text, computes the
//! interactions, z-scores the wide features with train-split statistics,
//! and assembles model input tensors. Also the dataset-level scoring used
//! by evaluation and the latency benchmark.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::data::EngagementRecord;
use crate::error::{Error, Result};
use crate::features::{
    assemble, interactions, zscore_apply, zscore_fit, EmbeddingProvider, FeatureVector,
    ItemRecord, NormalizationStats,
};
use crate::heads::TransferredOutputs;
use crate::model::{MlprModel, TASKS};

/// Item-embedding cache for the precompute deployment strategy.
pub type ItemEmbeddingCache = HashMap<String, Vec<f64>>;

pub struct FeaturePipeline {
    pub provider: EmbeddingProvider,
    pub stats: NormalizationStats,
    pub feature_count: usize,
}

impl FeaturePipeline {
    /// Fits the z-score statistics on the training records.
    pub fn fit(provider: EmbeddingProvider, train: &[EngagementRecord]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = train.iter().map(|r| r.features.clone()).collect();
        let stats = zscore_fit(&rows, "train")?;
        Ok(FeaturePipeline {
            provider,
            feature_count: stats.mean.len(),
            stats,
        })
    }

    /// Rebuilds a pipeline from checkpointed statistics.
    pub fn from_stats(provider: EmbeddingProvider, stats: NormalizationStats) -> Self {
        FeaturePipeline {
            provider,
            feature_count: stats.mean.len(),
            stats,
        }
    }

    /// Assembled input for one record; `item_cache` supplies precomputed
    /// item embeddings when present.
    pub fn features(
        &self,
        record: &EngagementRecord,
        item_cache: Option<&ItemEmbeddingCache>,
    ) -> Result<FeatureVector> {
        let mu_q = self.provider.encode_query(&record.query)?;
        let mu_i = match item_cache.and_then(|c| c.get(&record.item.item_id)) {
            Some(v) => v.clone(),
            None => self.provider.encode_item(&record.item)?,
        };
        let inter = interactions(&mu_q, &mu_i)?;
        let wide = zscore_apply(&self.stats, &record.features)?;
        assemble(&mu_q, &mu_i, &inter, &wide)
    }

    /// Precomputes embeddings for every distinct item in `items`.
    pub fn precompute_items(&self, items: &[&ItemRecord]) -> Result<ItemEmbeddingCache> {
        let mut cache = ItemEmbeddingCache::new();
        for item in items {
            if !cache.contains_key(&item.item_id) {
                cache.insert(item.item_id.clone(), self.provider.encode_item(item)?);
            }
        }
        Ok(cache)
    }

    /// Stacks records into a `[n, feature_len]` model input tensor.
    /// Feature building is pure per record, so rows run in parallel and are
    /// collected in order.
    pub fn batch(&self, records: &[EngagementRecord]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = records
            .par_iter()
            .map(|r| self.features(r, None).map(|f| f.values().to_vec()))
            .collect::<Result<_>>()?;
        let width = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(records.len() * width);
        for row in rows {
            data.extend_from_slice(&row);
        }
        Tensor::new(vec![records.len(), width], data)
    }

    /// Checkpoint tensors for the fitted statistics.
    pub fn stats_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            (
                "pipeline.zscore.mean".to_string(),
                Tensor::new(vec![1, self.stats.mean.len()], self.stats.mean.clone())
                    .expect("sizes match"),
            ),
            (
                "pipeline.zscore.std".to_string(),
                Tensor::new(vec![1, self.stats.std.len()], self.stats.std.clone())
                    .expect("sizes match"),
            ),
        ]
    }

    /// Rebuilds statistics from checkpoint tensors.
    pub fn stats_from_tensors(extra: &[(String, Tensor)]) -> Result<NormalizationStats> {
        let find = |name: &str| -> Result<Vec<f64>> {
            extra
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        Ok(NormalizationStats {
            mean: find("pipeline.zscore.mean")?,
            std: find("pipeline.zscore.std")?,
            fitted_on: "checkpoint".to_string(),
        })
    }
}

/// Labels and optional impression weights for a record batch.
pub struct BatchTargets {
    pub labels: [Tensor; TASKS],
    pub weights: Option<Vec<f64>>,
}

pub fn targets(records: &[EngagementRecord], impression_weighting: bool) -> BatchTargets {
    let mut columns: [Vec<f64>; TASKS] = [Vec::new(), Vec::new(), Vec::new()];
    for r in records {
        for (k, col) in columns.iter_mut().enumerate() {
            col.push(r.label(k));
        }
    }
    let [c0, c1, c2] = columns;
    BatchTargets {
        labels: [Tensor::column(c0), Tensor::column(c1), Tensor::column(c2)],
        weights: impression_weighting
            .then(|| records.iter().map(|r| r.impressions as f64).collect()),
    }
}

/// Scores every record with a frozen model, in deterministic batch order.
pub fn score_records(
    model: &mut MlprModel,
    pipeline: &FeaturePipeline,
    records: &[EngagementRecord],
    batch_size: usize,
) -> Result<Vec<TransferredOutputs>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let x = pipeline.batch(chunk)?;
        out.extend(model.predict(&x)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FunnelParams, Toggles};
    use crate::features::{EmbeddingConfig, HashEncoder};

    fn tiny_dataset() -> Vec<EngagementRecord> {
        crate::data::generate(&FunnelParams {
            n_queries: 12,
            n_items: 40,
            candidates_per_query: 6,
            feature_count: 5,
            seed: 3,
            ..FunnelParams::default()
        })
        .unwrap()
    }

    #[test]
    fn batch_width_matches_layout_formula() {
        let records = tiny_dataset();
        let provider = EmbeddingProvider::Hash(HashEncoder::new(8, 2));
        let pipeline = FeaturePipeline::fit(provider, &records).unwrap();
        let x = pipeline.batch(&records[..4]).unwrap();
        assert_eq!(x.shape(), &[4, 5 * 8 + 1 + 5]);
    }

    #[test]
    fn cached_item_embeddings_match_direct_encoding() {
        let records = tiny_dataset();
        let provider = EmbeddingProvider::Hash(HashEncoder::new(8, 2));
        let pipeline = FeaturePipeline::fit(provider, &records).unwrap();
        let items: Vec<&ItemRecord> = records.iter().map(|r| &r.item).collect();
        let cache = pipeline.precompute_items(&items).unwrap();
        for r in &records[..8] {
            let direct = pipeline.features(r, None).unwrap();
            let cached = pipeline.features(r, Some(&cache)).unwrap();
            assert_eq!(direct, cached);
        }
    }

    #[test]
    fn stats_round_trip_through_tensors() {
        let records = tiny_dataset();
        let provider = EmbeddingProvider::Hash(HashEncoder::new(8, 2));
        let pipeline = FeaturePipeline::fit(provider, &records).unwrap();
        let tensors = pipeline.stats_tensors();
        let stats = FeaturePipeline::stats_from_tensors(&tensors).unwrap();
        assert_eq!(stats.mean, pipeline.stats.mean);
        assert_eq!(stats.std, pipeline.stats.std);
    }

    #[test]
    fn scoring_is_deterministic_and_monotone() {
        let records = tiny_dataset();
        let provider = EmbeddingProvider::Hash(HashEncoder::new(8, 2));
        let pipeline = FeaturePipeline::fit(provider, &records).unwrap();
        let config = crate::model::tiny_config(Toggles::all_multi_task());
        let mut config = config;
        config.embedding = EmbeddingConfig::HashEncoder { dim: 8, seed: 2 };
        config.feature_count = 5;
        let mut model = MlprModel::new(config).unwrap();
        let a = score_records(&mut model, &pipeline, &records, 16).unwrap();
        let b = score_records(&mut model, &pipeline, &records, 16).unwrap();
        assert_eq!(a.len(), records.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
            assert!(x.is_monotone());
        }
    }

    #[test]
    fn targets_follow_funnel_labels() {
        let records = tiny_dataset();
        let t = targets(&records[..10], true);
        for i in 0..10 {
            let c = t.labels[0].data()[i];
            let a = t.labels[1].data()[i];
            let p = t.labels[2].data()[i];
            assert!(p <= a && a <= c);
        }
        assert_eq!(t.weights.as_ref().unwrap().len(), 10);
    }
}
