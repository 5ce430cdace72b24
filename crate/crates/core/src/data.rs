//! Synthetic impression -> click -> add-to-cart -> purchase dataset with
//! known ground truth, plus filtering, splitting, and TSV round-trip I/O.
//!
//! Queries and items carry a shared topic structure. Latent vectors are
//! topic centers plus noise, relevance is sigmoid(u·v), and each funnel
//! stage applies its own affine link before sampling counts down the chain,
//! so later stages are rarer by construction. Texts mention the topic word,
//! which keeps the hashed text embeddings informative, while the ranking
//! features are noisy probes of the same relevance — wide features help but
//! don't suffice on their own.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::config::{FunnelParams, SplitConfig};
use crate::error::{Error, Result};
use crate::features::{ItemRecord, QueryRecord};

/// Stage-conditional ground-truth probabilities (synthetic data only):
/// p(click | impression), p(ATC | click), p(purchase | ATC).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub p_click: f64,
    pub p_atc: f64,
    pub p_purchase: f64,
}

/// One query-item pair with engagement counts and wide features.
#[derive(Debug, Clone, PartialEq)]
pub struct EngagementRecord {
    pub query: QueryRecord,
    pub item: ItemRecord,
    pub impressions: u32,
    pub clicks: u32,
    pub atcs: u32,
    pub purchases: u32,
    pub features: Vec<f64>,
    pub ground_truth: Option<GroundTruth>,
}

impl EngagementRecord {
    pub fn y_click(&self) -> f64 {
        (self.clicks > 0) as u8 as f64
    }

    pub fn y_atc(&self) -> f64 {
        (self.atcs > 0) as u8 as f64
    }

    pub fn y_purchase(&self) -> f64 {
        (self.purchases > 0) as u8 as f64
    }

    pub fn label(&self, task: usize) -> f64 {
        match task {
            0 => self.y_click(),
            1 => self.y_atc(),
            _ => self.y_purchase(),
        }
    }

    /// Engagement count used as the ranking gain for a task.
    pub fn gain(&self, task: usize) -> f64 {
        match task {
            0 => self.clicks as f64,
            1 => self.atcs as f64,
            _ => self.purchases as f64,
        }
    }

    /// Funnel ordering of counts and at least one impression.
    pub fn validate(&self) -> Result<()> {
        if self.impressions < 1 {
            return Err(Error::Contract(format!(
                "pair ({}, {}) has zero impressions",
                self.query.query_id, self.item.item_id
            )));
        }
        if self.clicks > self.impressions
            || self.atcs > self.clicks
            || self.purchases > self.atcs
        {
            return Err(Error::Contract(format!(
                "pair ({}, {}) violates funnel ordering: {} imp / {} click / {} atc / {} purchase",
                self.query.query_id,
                self.item.item_id,
                self.impressions,
                self.clicks,
                self.atcs,
                self.purchases
            )));
        }
        if let Some(gt) = &self.ground_truth {
            for p in [gt.p_click, gt.p_atc, gt.p_purchase] {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::Contract(format!(
                        "ground-truth probability {p} outside (0, 1)"
                    )));
                }
            }
        }
        Ok(())
    }
}

const TOPIC_WORDS: [&str; 16] = [
    "lamp", "sofa", "bike", "sneaker", "phone", "mug", "desk", "puzzle", "jacket", "blender",
    "camera", "guitar", "tent", "watch", "keyboard", "stroller",
];
const FILLER_WORDS: [&str; 10] = [
    "best", "new", "cheap", "large", "small", "portable", "modern", "classic", "compact", "deluxe",
];
const BRANDS: [&str; 8] = [
    "acme", "zenbrand", "nordica", "polarwave", "quickco", "maxline", "urbanix", "homestead",
];
const COLORS: [&str; 8] = [
    "red", "blue", "green", "black", "white", "silver", "teal", "yellow",
];
const GENDERS: [&str; 4] = ["", "men", "women", "unisex"];

fn sigmoid(x: f64) -> f64 {
    crate::autodiff::graph::sigmoid(x)
}

fn latent(rng: &mut ChaCha8Rng, params: &FunnelParams, topic: usize) -> Vec<f64> {
    (0..params.latent_dim)
        .map(|d| {
            let center = if d == topic % params.latent_dim {
                params.topic_strength
            } else {
                0.0
            };
            let noise: f64 = StandardNormal.sample(rng);
            center + params.latent_noise * noise
        })
        .collect()
}

struct Catalog {
    items: Vec<ItemRecord>,
    latents: Vec<Vec<f64>>,
    by_topic: Vec<Vec<usize>>,
}

fn build_catalog(params: &FunnelParams, rng: &mut ChaCha8Rng) -> Catalog {
    let mut items = Vec::with_capacity(params.n_items);
    let mut latents = Vec::with_capacity(params.n_items);
    let mut by_topic = vec![Vec::new(); params.n_topics];
    for m in 0..params.n_items {
        let topic = rng.gen_range(0..params.n_topics);
        let word = TOPIC_WORDS[topic % TOPIC_WORDS.len()];
        let brand = BRANDS[rng.gen_range(0..BRANDS.len())];
        let color = COLORS[rng.gen_range(0..COLORS.len())];
        let gender = GENDERS[rng.gen_range(0..GENDERS.len())];
        items.push(ItemRecord {
            item_id: format!("i{m:06}"),
            title: format!("{brand} {color} {word} model {m}"),
            item_type: word.to_string(),
            brand: brand.to_string(),
            color: color.to_string(),
            gender: gender.to_string(),
        });
        latents.push(latent(rng, params, topic));
        by_topic[topic].push(m);
    }
    Catalog {
        items,
        latents,
        by_topic,
    }
}

/// Feature-probe weights are global per column, derived from the dataset
/// seed: the first half of the columns are noisy relevance probes, the rest
/// pure noise.
fn probe_weights(params: &FunnelParams) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0xfeed_beef);
    (0..params.feature_count / 2)
        .map(|_| rng.gen_range(0.5..1.5))
        .collect()
}

const QUERY_BLOCK: usize = 64;

/// Generates the full query-item pair corpus. Queries are produced in
/// independent blocks with per-block derived seeds and merged in block
/// order, so output is identical at any worker count.
pub fn generate(params: &FunnelParams) -> Result<Vec<EngagementRecord>> {
    params.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(params.seed);
    let catalog = build_catalog(params, &mut master);
    let probes = probe_weights(params);

    let n_blocks = params.n_queries.div_ceil(QUERY_BLOCK);
    let blocks: Vec<Vec<EngagementRecord>> = (0..n_blocks)
        .into_par_iter()
        .map(|block| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(params.seed ^ (0x9e37_79b9u64).wrapping_mul(block as u64 + 1));
            let lo = block * QUERY_BLOCK;
            let hi = ((block + 1) * QUERY_BLOCK).min(params.n_queries);
            let mut records = Vec::with_capacity((hi - lo) * params.candidates_per_query);
            for qi in lo..hi {
                records.extend(generate_query(params, &catalog, &probes, &mut rng, qi));
            }
            records
        })
        .collect();

    Ok(blocks.into_iter().flatten().collect())
}

fn generate_query(
    params: &FunnelParams,
    catalog: &Catalog,
    probes: &[f64],
    rng: &mut ChaCha8Rng,
    qi: usize,
) -> Vec<EngagementRecord> {
    let topic = rng.gen_range(0..params.n_topics);
    let word = TOPIC_WORDS[topic % TOPIC_WORDS.len()];
    let filler_a = FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())];
    let filler_b = FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())];
    let query = QueryRecord {
        query_id: format!("q{qi:06}"),
        text: format!("{filler_a} {filler_b} {word}"),
    };
    let u = latent(rng, params, topic);

    // Candidate set: a topic-biased sample without duplicates.
    let mut picked = std::collections::HashSet::new();
    let mut candidates = Vec::with_capacity(params.candidates_per_query);
    let topic_pool = &catalog.by_topic[topic];
    let mut guard = 0;
    while candidates.len() < params.candidates_per_query && guard < params.candidates_per_query * 50
    {
        guard += 1;
        let m = if !topic_pool.is_empty() && rng.gen::<f64>() < params.same_topic_fraction {
            topic_pool[rng.gen_range(0..topic_pool.len())]
        } else {
            rng.gen_range(0..params.n_items)
        };
        if picked.insert(m) {
            candidates.push(m);
        }
    }

    let mut records = Vec::with_capacity(candidates.len());
    for m in candidates {
        let v = &catalog.latents[m];
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let relevance = sigmoid(dot);
        let [a1, b1] = params.stage_coefficients[0];
        let [a2, b2] = params.stage_coefficients[1];
        let [a3, b3] = params.stage_coefficients[2];
        let p_click = sigmoid(a1 * relevance + b1);
        let p_atc = sigmoid(a2 * relevance + b2);
        let p_purchase = sigmoid(a3 * relevance + b3);

        let impressions = 1 + Poisson::new(params.impression_mean)
            .expect("validated mean > 0")
            .sample(rng) as u32;
        let clicks = Binomial::new(impressions as u64, p_click)
            .expect("probability in range")
            .sample(rng) as u32;
        let atcs = Binomial::new(clicks as u64, p_atc)
            .expect("probability in range")
            .sample(rng) as u32;
        let purchases = Binomial::new(atcs as u64, p_purchase)
            .expect("probability in range")
            .sample(rng) as u32;

        let mut features = Vec::with_capacity(params.feature_count);
        for &w in probes {
            let noise: f64 = StandardNormal.sample(rng);
            features.push(w * relevance + params.feature_noise * noise);
        }
        while features.len() < params.feature_count {
            let noise: f64 = StandardNormal.sample(rng);
            features.push(noise);
        }

        records.push(EngagementRecord {
            query: query.clone(),
            item: catalog.items[m].clone(),
            impressions,
            clicks,
            atcs,
            purchases,
            features,
            ground_truth: Some(GroundTruth {
                p_click,
                p_atc,
                p_purchase,
            }),
        });
    }
    records
}

/// Keeps records with impressions strictly greater than `threshold`
/// (pairs with at most `threshold` impressions are dropped).
pub fn filter_min_impressions(
    records: Vec<EngagementRecord>,
    threshold: u32,
) -> Vec<EngagementRecord> {
    records
        .into_iter()
        .filter(|r| r.impressions > threshold)
        .collect()
}

/// Train/validation/test partition.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<EngagementRecord>,
    pub validation: Vec<EngagementRecord>,
    pub test: Vec<EngagementRecord>,
}

/// Seeded shuffle followed by a contiguous cut. With `query_disjoint` the
/// shuffle-and-cut happens over query ids instead, so no query spans two
/// splits.
pub fn split(records: Vec<EngagementRecord>, config: &SplitConfig) -> Result<DatasetSplit> {
    let f = config.fractions;
    let total: f64 = f.iter().sum();
    if (total - 1.0).abs() > 1e-9 || f.iter().any(|&x| x <= 0.0) {
        return Err(Error::Contract(format!(
            "split fractions must be positive and sum to 1, got {:?}",
            f
        )));
    }
    if records.len() < 3 {
        return Err(Error::Contract(format!(
            "need at least 3 records to split, got {}",
            records.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    if config.query_disjoint {
        let mut query_ids: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if seen.insert(r.query.query_id.clone()) {
                query_ids.push(r.query.query_id.clone());
            }
        }
        if query_ids.len() < 3 {
            return Err(Error::Contract(
                "query-disjoint split needs at least 3 distinct queries".into(),
            ));
        }
        shuffle(&mut query_ids, &mut rng);
        let n = query_ids.len();
        let n_train = (f[0] * n as f64).floor() as usize;
        let n_val = (f[1] * n as f64).floor() as usize;
        let assign = |idx: usize| -> usize {
            if idx < n_train {
                0
            } else if idx < n_train + n_val {
                1
            } else {
                2
            }
        };
        let mut bucket_of = std::collections::HashMap::new();
        for (idx, qid) in query_ids.iter().enumerate() {
            bucket_of.insert(qid.clone(), assign(idx));
        }
        let mut out = [Vec::new(), Vec::new(), Vec::new()];
        for r in records {
            let b = bucket_of[&r.query.query_id];
            out[b].push(r);
        }
        let [train, validation, test] = out;
        Ok(DatasetSplit {
            train,
            validation,
            test,
        })
    } else {
        let mut index: Vec<usize> = (0..records.len()).collect();
        shuffle(&mut index, &mut rng);
        let n = records.len();
        let n_train = (f[0] * n as f64).floor() as usize;
        let n_val = (f[1] * n as f64).floor() as usize;
        let mut slots: Vec<Option<EngagementRecord>> = records.into_iter().map(Some).collect();
        let take = |slots: &mut Vec<Option<EngagementRecord>>, ids: &[usize]| {
            ids.iter()
                .map(|&i| slots[i].take().expect("each index taken once"))
                .collect::<Vec<_>>()
        };
        let train = take(&mut slots, &index[..n_train]);
        let validation = take(&mut slots, &index[n_train..n_train + n_val]);
        let test = take(&mut slots, &index[n_train + n_val..]);
        Ok(DatasetSplit {
            train,
            validation,
            test,
        })
    }
}

/// Fisher-Yates with the given rng.
fn shuffle<T>(values: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..values.len()).rev() {
        let j = rng.gen_range(0..=i);
        values.swap(i, j);
    }
}

const BASE_COLUMNS: [&str; 12] = [
    "query_id",
    "item_id",
    "query_text",
    "item_title",
    "item_type",
    "item_brand",
    "item_color",
    "item_gender",
    "impressions",
    "clicks",
    "atcs",
    "purchases",
];
const GT_COLUMNS: [&str; 3] = ["p_click", "p_atc", "p_purchase"];

/// Writes records as a TSV with a header row. Floats use the shortest
/// representation that round-trips exactly.
pub fn save_tsv(records: &[EngagementRecord], path: impl AsRef<std::path::Path>) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let feature_count = records.first().map(|r| r.features.len()).unwrap_or(0);
    let with_gt = records.first().map(|r| r.ground_truth.is_some()).unwrap_or(false);

    let mut header: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..feature_count).map(|i| format!("f_{i}")));
    if with_gt {
        header.extend(GT_COLUMNS.iter().map(|s| s.to_string()));
    }

    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{}", header.join("\t"))?;
    for r in records {
        if r.features.len() != feature_count || r.ground_truth.is_some() != with_gt {
            return Err(Error::Contract(
                "records disagree on feature count or ground-truth presence".into(),
            ));
        }
        let text_fields = [
            r.query.query_id.as_str(),
            r.item.item_id.as_str(),
            r.query.text.as_str(),
            r.item.title.as_str(),
            r.item.item_type.as_str(),
            r.item.brand.as_str(),
            r.item.color.as_str(),
            r.item.gender.as_str(),
        ];
        for field in text_fields {
            if field.contains('\t') || field.contains('\n') {
                return Err(Error::Contract(format!(
                    "text field contains a separator: {field:?}"
                )));
            }
        }
        let mut row = text_fields.map(str::to_string).to_vec();
        for count in [r.impressions, r.clicks, r.atcs, r.purchases] {
            row.push(count.to_string());
        }
        for &v in &r.features {
            row.push(format!("{v}"));
        }
        if let Some(gt) = &r.ground_truth {
            for v in [gt.p_click, gt.p_atc, gt.p_purchase] {
                row.push(format!("{v}"));
            }
        }
        writeln!(w, "{}", row.join("\t"))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset TSV, re-validating the funnel ordering of every record.
pub fn load_tsv(path: impl AsRef<std::path::Path>) -> Result<Vec<EngagementRecord>> {
    use std::io::BufRead;
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines().enumerate();

    let header = match lines.next() {
        None => {
            return Err(Error::Parse {
                path: display,
                line: 1,
                msg: "empty file".into(),
            })
        }
        Some((_, line)) => line?,
    };
    let columns: Vec<&str> = header.split('\t').collect();
    if columns.len() < BASE_COLUMNS.len()
        || columns[..BASE_COLUMNS.len()] != BASE_COLUMNS[..]
    {
        return Err(Error::Parse {
            path: display,
            line: 1,
            msg: "unexpected header".into(),
        });
    }
    let with_gt = columns.ends_with(&GT_COLUMNS);
    let feature_count = columns.len() - BASE_COLUMNS.len() - if with_gt { 3 } else { 0 };
    let expected = columns.len();

    let mut records = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != expected {
            return Err(Error::Parse {
                path: display,
                line: lineno,
                msg: format!("expected {} columns, got {}", expected, fields.len()),
            });
        }
        let parse_count = |s: &str, what: &str| -> Result<u32> {
            s.parse::<u32>().map_err(|e| Error::Parse {
                path: display.clone(),
                line: lineno,
                msg: format!("{what}: {e}"),
            })
        };
        let parse_float = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse {
                path: display.clone(),
                line: lineno,
                msg: format!("{what}: {e}"),
            })
        };
        let mut features = Vec::with_capacity(feature_count);
        for (j, s) in fields[12..12 + feature_count].iter().enumerate() {
            features.push(parse_float(s, &format!("f_{j}"))?);
        }
        let ground_truth = if with_gt {
            Some(GroundTruth {
                p_click: parse_float(fields[12 + feature_count], "p_click")?,
                p_atc: parse_float(fields[13 + feature_count], "p_atc")?,
                p_purchase: parse_float(fields[14 + feature_count], "p_purchase")?,
            })
        } else {
            None
        };
        let record = EngagementRecord {
            query: QueryRecord {
                query_id: fields[0].to_string(),
                text: fields[2].to_string(),
            },
            item: ItemRecord {
                item_id: fields[1].to_string(),
                title: fields[3].to_string(),
                item_type: fields[4].to_string(),
                brand: fields[5].to_string(),
                color: fields[6].to_string(),
                gender: fields[7].to_string(),
            },
            impressions: parse_count(fields[8], "impressions")?,
            clicks: parse_count(fields[9], "clicks")?,
            atcs: parse_count(fields[10], "atcs")?,
            purchases: parse_count(fields[11], "purchases")?,
            features,
            ground_truth,
        };
        record.validate().map_err(|e| Error::Parse {
            path: display.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Dataset statistics in the shape of the usual corpus table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetStats {
    pub queries: usize,
    pub items: usize,
    pub pairs: usize,
    pub impressions: u64,
}

pub fn stats(records: &[EngagementRecord]) -> DatasetStats {
    let queries: std::collections::HashSet<&str> =
        records.iter().map(|r| r.query.query_id.as_str()).collect();
    let items: std::collections::HashSet<&str> =
        records.iter().map(|r| r.item.item_id.as_str()).collect();
    DatasetStats {
        queries: queries.len(),
        items: items.len(),
        pairs: records.len(),
        impressions: records.iter().map(|r| r.impressions as u64).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> FunnelParams {
        FunnelParams {
            n_queries: 40,
            n_items: 120,
            candidates_per_query: 10,
            feature_count: 6,
            seed: 77,
            ..FunnelParams::default()
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let params = small_params();
        let a = generate(&params).unwrap();
        let b = generate(&params).unwrap();
        assert_eq!(a, b);
        let mut other = params;
        other.seed += 1;
        assert_ne!(generate(&other).unwrap(), a);
    }

    #[test]
    fn every_record_respects_the_funnel() {
        let records = generate(&small_params()).unwrap();
        assert!(!records.is_empty());
        for r in &records {
            r.validate().unwrap();
            assert!(r.y_purchase() <= r.y_atc() && r.y_atc() <= r.y_click());
        }
    }

    #[test]
    fn ground_truth_probabilities_in_open_interval() {
        let records = generate(&small_params()).unwrap();
        for r in records {
            let gt = r.ground_truth.unwrap();
            for p in [gt.p_click, gt.p_atc, gt.p_purchase] {
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn empirical_click_rate_matches_ground_truth() {
        // Per-impression clicks are Bernoulli(p), so total clicks over total
        // impressions estimates the impression-weighted mean of p within
        // binomial error.
        let params = FunnelParams {
            n_queries: 2500,
            n_items: 4000,
            candidates_per_query: 40,
            feature_count: 4,
            seed: 11,
            ..FunnelParams::default()
        };
        let records = generate(&params).unwrap();
        assert!(records.len() >= 100_000);
        let total_imp: f64 = records.iter().map(|r| r.impressions as f64).sum();
        let total_clicks: f64 = records.iter().map(|r| r.clicks as f64).sum();
        let expected: f64 = records
            .iter()
            .map(|r| r.impressions as f64 * r.ground_truth.as_ref().unwrap().p_click)
            .sum::<f64>()
            / total_imp;
        let rate = total_clicks / total_imp;
        let se = records
            .iter()
            .map(|r| {
                let p = r.ground_truth.as_ref().unwrap().p_click;
                r.impressions as f64 * p * (1.0 - p)
            })
            .sum::<f64>()
            .sqrt()
            / total_imp;
        assert!(
            (rate - expected).abs() <= 3.0 * se,
            "click rate {rate} vs expected {expected} (se {se})"
        );
    }

    #[test]
    fn filter_drops_at_most_five_impressions() {
        let records = generate(&small_params()).unwrap();
        let mut five = records[0].clone();
        five.impressions = 5;
        five.clicks = five.clicks.min(5);
        five.atcs = five.atcs.min(five.clicks);
        five.purchases = five.purchases.min(five.atcs);
        let mut six = records[0].clone();
        six.impressions = 6;
        six.clicks = six.clicks.min(6);
        six.atcs = six.atcs.min(six.clicks);
        six.purchases = six.purchases.min(six.atcs);
        let kept = filter_min_impressions(vec![five, six], 5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].impressions, 6);
        assert!(filter_min_impressions(Vec::new(), 5).is_empty());
    }

    #[test]
    fn split_sizes_are_exact_for_round_fractions() {
        let params = FunnelParams {
            n_queries: 10,
            candidates_per_query: 10,
            ..small_params()
        };
        let records: Vec<EngagementRecord> = generate(&params).unwrap().into_iter().take(100).collect();
        assert_eq!(records.len(), 100);
        let split_cfg = SplitConfig::default();
        let s = split(records.clone(), &split_cfg).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));

        // Partition: union is the input multiset, splits are disjoint.
        let mut all: Vec<String> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .map(|r| format!("{}|{}", r.query.query_id, r.item.item_id))
            .collect();
        all.sort();
        let mut orig: Vec<String> = records
            .iter()
            .map(|r| format!("{}|{}", r.query.query_id, r.item.item_id))
            .collect();
        orig.sort();
        assert_eq!(all, orig);

        // Same seed gives the identical split.
        let s2 = split(records, &split_cfg).unwrap();
        assert_eq!(s.train, s2.train);
        assert_eq!(s.test, s2.test);
    }

    #[test]
    fn query_disjoint_split_separates_queries() {
        let records = generate(&small_params()).unwrap();
        let cfg = SplitConfig {
            query_disjoint: true,
            ..SplitConfig::default()
        };
        let s = split(records, &cfg).unwrap();
        let train_q: std::collections::HashSet<String> =
            s.train.iter().map(|r| r.query.query_id.clone()).collect();
        for r in s.test.iter().chain(&s.validation) {
            assert!(!train_q.contains(&r.query.query_id));
        }
    }

    #[test]
    fn split_rejects_tiny_inputs() {
        let records: Vec<EngagementRecord> =
            generate(&small_params()).unwrap().into_iter().take(2).collect();
        assert!(split(records, &SplitConfig::default()).is_err());
    }

    #[test]
    fn tsv_round_trip_is_lossless() {
        let records = generate(&small_params()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        save_tsv(&records, &path).unwrap();
        let back = load_tsv(&path).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn malformed_row_reports_its_line_number() {
        let records: Vec<EngagementRecord> =
            generate(&small_params()).unwrap().into_iter().take(10).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        save_tsv(&records, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        // Corrupt data line 6 (file line 7, after the header).
        let lines: Vec<&str> = text.lines().collect();
        let mut broken: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        broken[6] = broken[6].rsplit_once('\t').unwrap().0.to_string();
        text = broken.join("\n") + "\n";
        std::fs::write(&path, text).unwrap();
        let err = load_tsv(&path).unwrap_err();
        assert!(err.to_string().contains("line 7"), "{err}");
    }

    #[test]
    fn stats_counts_distinct_ids() {
        let records = generate(&small_params()).unwrap();
        let s = stats(&records);
        assert_eq!(s.queries, 40);
        assert!(s.items <= 120);
        assert_eq!(s.pairs, records.len());
        assert!(s.impressions >= records.len() as u64);
    }
}
