//! Ranking and prediction metrics: AUC (Mann-Whitney rank form), NDCG@k
//! with linear gains, latency percentiles, and a paired two-tailed t-test
//! over per-query values. Each has a brute-force oracle in the tests.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Compensated (Kahan) sum; metric aggregation over queries must not depend
/// on accumulation order at the 1e-12 level.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

pub fn kahan_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    kahan_sum(values.iter().copied()) / values.len() as f64
}

/// ROC AUC in the Mann-Whitney form via average ranks:
/// (#concordant + 0.5 * #tied) / (#pos * #neg).
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dimension(
            "auc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract("auc labels must be binary".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "auc scores".into(),
        });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {n_pos} positives / {n_neg} negatives"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tie groups, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1.0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// One query's ranking: items sorted by descending score, ties broken by
/// ascending item id for reproducibility.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub query_id: String,
    /// (item_id, score, gain) in final rank order.
    pub items: Vec<(String, f64, f64)>,
}

impl RankedList {
    pub fn new(query_id: impl Into<String>, mut items: Vec<(String, f64, f64)>) -> Result<Self> {
        if items.iter().any(|(_, s, _)| !s.is_finite()) {
            return Err(Error::NonFinite {
                context: "ranking scores".into(),
            });
        }
        items.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite scores")
                .then_with(|| a.0.cmp(&b.0))
        });
        Ok(RankedList {
            query_id: query_id.into(),
            items,
        })
    }

    pub fn gains(&self) -> Vec<f64> {
        self.items.iter().map(|(_, _, g)| *g).collect()
    }
}

fn dcg_at_k(gains: &[f64], k: usize) -> f64 {
    kahan_sum(
        gains
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| g / ((i + 2) as f64).log2()),
    )
}

/// NDCG@k with linear gains: DCG over the given ranking normalized by the
/// ideal DCG. Returns `None` when every gain is zero (the query is skipped
/// and counted separately by the aggregation).
pub fn ndcg_at_k(gains_in_rank_order: &[f64], k: usize) -> Result<Option<f64>> {
    if k < 1 {
        return Err(Error::Contract(format!("ndcg needs k >= 1, got {k}")));
    }
    if gains_in_rank_order.iter().any(|&g| g < 0.0) {
        return Err(Error::Contract("ndcg gains must be nonnegative".into()));
    }
    if gains_in_rank_order.iter().all(|&g| g == 0.0) {
        return Ok(None);
    }
    let dcg = dcg_at_k(gains_in_rank_order, k);
    let mut ideal = gains_in_rank_order.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).expect("finite gains"));
    let idcg = dcg_at_k(&ideal, k);
    if idcg == 0.0 {
        // Relevant items exist but none fit in the top k of any ordering.
        return Ok(Some(0.0));
    }
    Ok(Some(dcg / idcg))
}

/// Mean NDCG@k over queries; all-zero-gain queries are skipped and counted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NdcgAggregate {
    pub mean: f64,
    pub n_queries: usize,
    pub n_skipped: usize,
}

pub fn mean_ndcg(lists: &[RankedList], k: usize) -> Result<NdcgAggregate> {
    let mut values = Vec::with_capacity(lists.len());
    let mut skipped = 0;
    for list in lists {
        match ndcg_at_k(&list.gains(), k)? {
            Some(v) => values.push(v),
            None => skipped += 1,
        }
    }
    Ok(NdcgAggregate {
        mean: kahan_mean(&values),
        n_queries: values.len(),
        n_skipped: skipped,
    })
}

/// 99th-percentile by the sort-and-index definition:
/// sorted ascending, element at index ceil(0.99 * n) - 1.
pub fn p99(samples: &[f64]) -> Result<f64> {
    percentile(samples, 0.99)
}

pub fn percentile(samples: &[f64], q: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("percentile of an empty sample set".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Contract(format!("percentile q={q} outside [0, 1]")));
    }
    if samples.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Contract("latency samples must be finite and nonnegative".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let idx = ((q * sorted.len() as f64).ceil() as usize).max(1) - 1;
    Ok(sorted[idx])
}

/// Paired two-tailed t-test result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub mean_diff: f64,
}

/// Paired two-tailed t-test over per-query metric values of two runs.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::dimension(
            "t_test",
            format!("{} vs {} paired values", a.len(), b.len()),
        ));
    }
    if a.len() < 2 {
        return Err(Error::Contract("t-test needs at least 2 pairs".into()));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let mean = kahan_mean(&diffs);
    let var = kahan_sum(diffs.iter().map(|&d| (d - mean) * (d - mean))) / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        let p = if mean == 0.0 { 1.0 } else { 0.0 };
        return Ok(PairedTTest {
            t: if mean == 0.0 { 0.0 } else { f64::INFINITY * mean.signum() },
            df,
            p_value: p,
            mean_diff: mean,
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    let p_value = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedTTest {
        t,
        df,
        p_value,
        mean_diff: mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive pairwise AUC: concordant + half ties over pos*neg pairs.
    fn auc_bruteforce(scores: &[f64], labels: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, (&si, &yi)) in scores.iter().zip(labels).enumerate() {
            for (j, (&sj, &yj)) in scores.iter().zip(labels).enumerate() {
                if i == j || yi != 1.0 || yj != 0.0 {
                    continue;
                }
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_separation_gives_one() {
        let auc = auc(&[0.9, 0.2, 0.1], &[1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(auc, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn full_tie_gives_half() {
        let auc = auc(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(auc, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn auc_matches_bruteforce_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(2..=8);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..5) as f64) / 4.0) // force ties
                .collect();
            let labels: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
            let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
            if n_pos == 0 || n_pos == n {
                continue;
            }
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_bruteforce(&scores, &labels);
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-12);
        }
    }

    #[test]
    fn auc_single_class_is_undefined() {
        let err = auc(&[0.1, 0.2], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scores: Vec<f64> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<f64> = (0..50).map(|_| rng.gen_range(0..2) as f64).collect();
        let base = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| 1.0 / (1.0 + (-2.0 * s).exp())).collect();
        assert_abs_diff_eq!(auc(&squashed, &labels).unwrap(), base, epsilon = 1e-12);
    }

    #[test]
    fn ndcg_single_relevant_first_is_one() {
        assert_abs_diff_eq!(
            ndcg_at_k(&[1.0, 0.0], 1).unwrap().unwrap(),
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn ndcg_single_relevant_second_at_k1_is_zero() {
        assert_abs_diff_eq!(
            ndcg_at_k(&[0.0, 1.0], 1).unwrap().unwrap(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn ndcg_matches_exhaustive_permutation_ideal() {
        // Ideal DCG by brute force: the max DCG over every permutation of
        // the gains must equal the sort-descending ideal.
        fn permutations(values: &[f64]) -> Vec<Vec<f64>> {
            if values.len() <= 1 {
                return vec![values.to_vec()];
            }
            let mut out = Vec::new();
            for i in 0..values.len() {
                let mut rest = values.to_vec();
                let v = rest.remove(i);
                for mut p in permutations(&rest) {
                    p.insert(0, v);
                    out.push(p);
                }
            }
            out
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..60 {
            let n = rng.gen_range(2..=6);
            let gains: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64).collect();
            if gains.iter().all(|&g| g == 0.0) {
                continue;
            }
            let k = 5.min(n);
            let best = permutations(&gains)
                .into_iter()
                .map(|p| dcg_at_k(&p, k))
                .fold(f64::NEG_INFINITY, f64::max);
            let got = ndcg_at_k(&gains, k).unwrap().unwrap();
            let want = dcg_at_k(&gains, k) / best;
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn ndcg_is_one_when_ranking_sorts_by_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let n = rng.gen_range(1..=8);
            let mut gains: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
            gains.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if gains.iter().all(|&g| g == 0.0) {
                continue;
            }
            for k in 1..=n {
                assert_abs_diff_eq!(
                    ndcg_at_k(&gains, k).unwrap().unwrap(),
                    1.0,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn all_zero_gains_are_skipped_not_scored() {
        assert_eq!(ndcg_at_k(&[0.0, 0.0], 2).unwrap(), None);
        assert!(ndcg_at_k(&[1.0], 0).is_err());
    }

    #[test]
    fn ranked_list_breaks_ties_by_item_id() {
        let list = RankedList::new(
            "q",
            vec![
                ("b".into(), 1.0, 2.0),
                ("a".into(), 1.0, 1.0),
                ("c".into(), 2.0, 0.0),
            ],
        )
        .unwrap();
        let ids: Vec<&str> = list.items.iter().map(|(id, _, _)| id.as_str()).collect();
        assert_eq!(ids, vec!["c", "a", "b"]);
    }

    #[test]
    fn p99_identical_samples() {
        let p = p99(&vec![7.0; 100]).unwrap();
        assert_eq!(p, 7.0);
    }

    #[test]
    fn p99_of_1_to_100_is_99() {
        let samples: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(p99(&samples).unwrap(), 99.0);
    }

    #[test]
    fn p99_matches_sort_definition_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..157).map(|_| rng.gen_range(0.0..50.0)).collect();
        let direct = {
            let mut s = samples.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s[((0.99 * s.len() as f64).ceil() as usize) - 1]
        };
        assert_eq!(p99(&samples).unwrap(), direct);
        let mut shuffled = samples.clone();
        shuffled.reverse();
        shuffled.swap(0, 57);
        assert_eq!(p99(&shuffled).unwrap(), direct);
        assert!(p99(&[]).is_err());
    }

    #[test]
    fn kahan_mean_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let values: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-1.0..1.0) * 1e6).collect();
        let a = kahan_mean(&values);
        let mut rev = values.clone();
        rev.reverse();
        let b = kahan_mean(&rev);
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn t_test_on_identical_runs_is_p_one() {
        let a = vec![0.4, 0.6, 0.5, 0.7];
        let t = paired_t_test(&a, &a).unwrap();
        assert_eq!(t.p_value, 1.0);
        assert_eq!(t.mean_diff, 0.0);
    }

    #[test]
    fn t_test_detects_a_consistent_shift() {
        let a: Vec<f64> = (0..30).map(|i| 0.5 + 0.001 * (i % 5) as f64).collect();
        let b: Vec<f64> = a.iter().map(|&x| x - 0.05).collect();
        let t = paired_t_test(&a, &b).unwrap();
        assert!(t.p_value < 1e-6, "p = {}", t.p_value);
        assert!(t.mean_diff > 0.0);
    }

    #[test]
    fn t_test_p_value_is_sane_for_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
        let t = paired_t_test(&a, &b).unwrap();
        assert!(t.p_value > 0.001 && t.p_value <= 1.0);
    }
}
