//! Deep & wide feature generation: query/item text embeddings, their
//! interactions (cosine, Hadamard, concatenation), and z-scored ranking
//! features, assembled into one fixed-layout input vector per pair.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One search query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
}

/// One product. Title is required; the other text fields may be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: String,
    pub item_type: String,
    pub brand: String,
    pub color: String,
    pub gender: String,
}

impl ItemRecord {
    /// The five text fields joined with a separator token, in the order the
    /// item encoder consumes them.
    pub fn joined_fields(&self) -> String {
        [
            self.title.as_str(),
            self.item_type.as_str(),
            self.brand.as_str(),
            self.color.as_str(),
            self.gender.as_str(),
        ]
        .join(" | ")
    }
}

/// Embedding provider configuration (serializable part of the model config).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EmbeddingConfig {
    /// Deterministic token n-gram hashing; no training required.
    HashEncoder { dim: usize, seed: u64 },
    /// Lookup of precomputed vectors from TSV files keyed by id.
    FileLookup {
        dim: usize,
        query_path: String,
        item_path: String,
    },
}

impl EmbeddingConfig {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingConfig::HashEncoder { dim, .. } => *dim,
            EmbeddingConfig::FileLookup { dim, .. } => *dim,
        }
    }
}

/// Deterministic text encoder or file-backed lookup.
#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    Hash(HashEncoder),
    File(FileLookup),
}

impl EmbeddingProvider {
    pub fn from_config(config: &EmbeddingConfig) -> Result<Self> {
        match config {
            EmbeddingConfig::HashEncoder { dim, seed } => {
                Ok(EmbeddingProvider::Hash(HashEncoder::new(*dim, *seed)))
            }
            EmbeddingConfig::FileLookup {
                dim,
                query_path,
                item_path,
            } => Ok(EmbeddingProvider::File(FileLookup::load(
                *dim, query_path, item_path,
            )?)),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Hash(h) => h.dim,
            EmbeddingProvider::File(f) => f.dim,
        }
    }

    pub fn encode_query(&self, query: &QueryRecord) -> Result<Vec<f64>> {
        match self {
            EmbeddingProvider::Hash(h) => Ok(h.encode(&query.text)),
            EmbeddingProvider::File(f) => f.lookup_query(&query.query_id),
        }
    }

    pub fn encode_item(&self, item: &ItemRecord) -> Result<Vec<f64>> {
        match self {
            EmbeddingProvider::Hash(h) => Ok(h.encode(&item.joined_fields())),
            EmbeddingProvider::File(f) => f.lookup_item(&item.item_id),
        }
    }
}

/// Token n-gram (n = 1..3) signed-hash encoder, L2-normalized. Stands in
/// for a trained text encoder: deterministic for a fixed input and seed,
/// and different seeds give independent feature spaces.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 1, "embedding dim must be >= 1");
        HashEncoder { dim, seed }
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower.split_whitespace().collect();
        let mut out = vec![0.0; self.dim];
        for n in 1..=3usize {
            if tokens.len() < n {
                break;
            }
            for window in tokens.windows(n) {
                let gram = window.join("_");
                let h = fnv1a64(self.seed, gram.as_bytes());
                let bucket = (h % self.dim as u64) as usize;
                let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
                out[bucket] += sign;
            }
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            // Empty text or full sign cancellation: fall back to a single
            // deterministic unit bucket so the norm contract still holds.
            let h = fnv1a64(self.seed, lower.as_bytes());
            out[(h % self.dim as u64) as usize] = 1.0;
        } else {
            out.iter_mut().for_each(|v| *v /= norm);
        }
        out
    }
}

/// Seeded FNV-1a, stable across platforms and toolchains.
fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed.wrapping_mul(0x100000001b3);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    // Final avalanche so bucket and sign bits are well mixed.
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    h
}

/// Embeddings read from TSV files: id column followed by `dim` floats.
#[derive(Debug, Clone)]
pub struct FileLookup {
    pub dim: usize,
    queries: HashMap<String, Vec<f64>>,
    items: HashMap<String, Vec<f64>>,
}

impl FileLookup {
    pub fn load(dim: usize, query_path: impl AsRef<Path>, item_path: impl AsRef<Path>) -> Result<Self> {
        Ok(FileLookup {
            dim,
            queries: read_embedding_tsv(query_path.as_ref(), dim)?,
            items: read_embedding_tsv(item_path.as_ref(), dim)?,
        })
    }

    pub fn lookup_query(&self, id: &str) -> Result<Vec<f64>> {
        self.queries
            .get(id)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding { id: id.to_string() })
    }

    pub fn lookup_item(&self, id: &str) -> Result<Vec<f64>> {
        self.items
            .get(id)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding { id: id.to_string() })
    }
}

fn read_embedding_tsv(path: &Path, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let file = std::fs::File::open(path)?;
    let mut map = HashMap::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().to_string();
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected {} embedding values, got {}", dim, values.len()),
            });
        }
        map.insert(id, values);
    }
    Ok(map)
}

/// Query/item embedding interactions in fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Interactions {
    pub cosine: f64,
    pub hadamard: Vec<f64>,
    /// Query embedding followed by item embedding.
    pub concat: Vec<f64>,
}

/// Cosine, Hadamard product, and concatenation of the two embeddings.
/// Cosine of a zero vector is defined as 0 (with a warning) rather than NaN.
pub fn interactions(mu_q: &[f64], mu_i: &[f64]) -> Result<Interactions> {
    if mu_q.len() != mu_i.len() {
        return Err(Error::dimension(
            "interactions",
            format!("query dim {} vs item dim {}", mu_q.len(), mu_i.len()),
        ));
    }
    let dot: f64 = mu_q.iter().zip(mu_i).map(|(a, b)| a * b).sum();
    let nq = mu_q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ni = mu_i.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cosine = if nq == 0.0 || ni == 0.0 {
        log::warn!("cosine of a zero embedding; defining it as 0");
        0.0
    } else {
        (dot / (nq * ni)).clamp(-1.0, 1.0)
    };
    let hadamard: Vec<f64> = mu_q.iter().zip(mu_i).map(|(a, b)| a * b).collect();
    let mut concat = Vec::with_capacity(2 * mu_q.len());
    concat.extend_from_slice(mu_q);
    concat.extend_from_slice(mu_i);
    Ok(Interactions {
        cosine,
        hadamard,
        concat,
    })
}

/// Per-feature normalization statistics fitted on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Identifier of the split the stats were fitted on.
    pub fitted_on: String,
}

const ZSCORE_STD_FLOOR: f64 = 1e-8;

/// Population mean and standard deviation per feature column.
pub fn zscore_fit(rows: &[Vec<f64>], fitted_on: &str) -> Result<NormalizationStats> {
    if rows.len() < 2 {
        return Err(Error::Contract(format!(
            "z-score fit needs at least 2 records, got {}",
            rows.len()
        )));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::dimension("zscore_fit", "ragged feature rows"));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; width];
    for row in rows {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0; width];
    for row in rows {
        for (s, (&v, &m)) in std.iter_mut().zip(row.iter().zip(&mean)) {
            let d = v - m;
            *s += d * d;
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n).sqrt());
    Ok(NormalizationStats {
        mean,
        std,
        fitted_on: fitted_on.to_string(),
    })
}

/// (x - mean) / max(std, 1e-8); constant features map to 0.
pub fn zscore_apply(stats: &NormalizationStats, features: &[f64]) -> Result<Vec<f64>> {
    if features.len() != stats.mean.len() {
        return Err(Error::dimension(
            "zscore_apply",
            format!("{} features vs {} fitted", features.len(), stats.mean.len()),
        ));
    }
    Ok(features
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(&x, (&m, &s))| (x - m) / s.max(ZSCORE_STD_FLOOR))
        .collect())
}

/// Named segments of the assembled input vector, in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    QueryEmbedding,
    ItemEmbedding,
    Cosine,
    Hadamard,
    ConcatInteraction,
    RankingFeatures,
}

/// The concatenated deep & wide input for one query-item pair. Layout:
/// query embedding (dim) | item embedding (dim) | cosine (1) |
/// Hadamard (dim) | query⊕item (2·dim) | normalized ranking features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    dim: usize,
    feature_count: usize,
}

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total layout length for a given embedding dim and feature count.
    pub fn expected_len(dim: usize, feature_count: usize) -> usize {
        5 * dim + 1 + feature_count
    }

    fn bounds(&self, segment: Segment) -> (usize, usize) {
        let d = self.dim;
        match segment {
            Segment::QueryEmbedding => (0, d),
            Segment::ItemEmbedding => (d, 2 * d),
            Segment::Cosine => (2 * d, 2 * d + 1),
            Segment::Hadamard => (2 * d + 1, 3 * d + 1),
            Segment::ConcatInteraction => (3 * d + 1, 5 * d + 1),
            Segment::RankingFeatures => (5 * d + 1, 5 * d + 1 + self.feature_count),
        }
    }

    pub fn segment(&self, segment: Segment) -> &[f64] {
        let (lo, hi) = self.bounds(segment);
        &self.values[lo..hi]
    }
}

/// Assembles the fixed-layout input vector, validating every segment length.
pub fn assemble(
    mu_q: &[f64],
    mu_i: &[f64],
    inter: &Interactions,
    normalized_features: &[f64],
) -> Result<FeatureVector> {
    let dim = mu_q.len();
    let check = |segment: &str, len: usize, expected: usize| -> Result<()> {
        if len != expected {
            return Err(Error::dimension(
                "assemble",
                format!("segment {segment}: length {len}, expected {expected}"),
            ));
        }
        Ok(())
    };
    check("item embedding", mu_i.len(), dim)?;
    check("hadamard", inter.hadamard.len(), dim)?;
    check("concat interaction", inter.concat.len(), 2 * dim)?;

    let feature_count = normalized_features.len();
    let mut values = Vec::with_capacity(FeatureVector::expected_len(dim, feature_count));
    values.extend_from_slice(mu_q);
    values.extend_from_slice(mu_i);
    values.push(inter.cosine);
    values.extend_from_slice(&inter.hadamard);
    values.extend_from_slice(&inter.concat);
    values.extend_from_slice(normalized_features);
    Ok(FeatureVector {
        values,
        dim,
        feature_count,
    })
}
