//! Dataset-level evaluation: per-task AUC over all pairs, per-task NDCG@k
//! averaged over queries, the metrics-report CSV format, per-query NDCG
//! dumps for paired significance tests, and the impression-percentile
//! grouping used for the knowledge-gain analysis.

use std::collections::BTreeMap;

use crate::data::EngagementRecord;
use crate::error::{Error, Result};
use crate::heads::TransferredOutputs;
use crate::metrics::{auc, mean_ndcg, ndcg_at_k, RankedList};
use crate::model::{TASKS, TASK_NAMES};

pub const NDCG_KS: [usize; 2] = [1, 5];

/// One row of the metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub model_variant: String,
    pub task: String,
    pub metric: String,
    pub k: Option<usize>,
    /// NaN encodes an undefined metric (e.g. single-class AUC), written as
    /// an empty value field.
    pub value: f64,
    pub n_queries: usize,
    pub n_skipped: usize,
}

/// Per-query NDCG values, used by the paired t-test between runs.
#[derive(Debug, Clone, PartialEq)]
pub struct PerQueryNdcg {
    pub query_id: String,
    pub task: String,
    pub k: usize,
    pub value: f64,
}

pub struct EvaluationReport {
    pub rows: Vec<MetricRow>,
    pub per_query: Vec<PerQueryNdcg>,
}

/// Groups records (with their scores) per query, in first-appearance order.
fn group_by_query<'a>(
    records: &'a [EngagementRecord],
    scores: &'a [TransferredOutputs],
) -> Vec<(String, Vec<(&'a EngagementRecord, &'a TransferredOutputs)>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<(&EngagementRecord, &TransferredOutputs)>> =
        BTreeMap::new();
    for (r, s) in records.iter().zip(scores) {
        if !groups.contains_key(&r.query.query_id) {
            order.push(r.query.query_id.clone());
        }
        groups.entry(r.query.query_id.clone()).or_default().push((r, s));
    }
    order
        .into_iter()
        .map(|qid| {
            let group = groups.remove(&qid).expect("grouped above");
            (qid, group)
        })
        .collect()
}

/// Full evaluation of one scored dataset.
pub fn evaluate(
    variant: &str,
    records: &[EngagementRecord],
    scores: &[TransferredOutputs],
) -> Result<EvaluationReport> {
    if records.len() != scores.len() {
        return Err(Error::dimension(
            "evaluate",
            format!("{} records vs {} scores", records.len(), scores.len()),
        ));
    }
    let groups = group_by_query(records, scores);
    let n_queries_total = groups.len();
    let mut rows = Vec::new();
    let mut per_query = Vec::new();

    for (task, task_name) in TASK_NAMES.iter().enumerate() {
        // AUC over all pairs.
        let score_col: Vec<f64> = scores.iter().map(|s| s.for_task(task)).collect();
        let label_col: Vec<f64> = records.iter().map(|r| r.label(task)).collect();
        let auc_value = match auc(&score_col, &label_col) {
            Ok(v) => v,
            Err(Error::UndefinedMetric(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        rows.push(MetricRow {
            model_variant: variant.to_string(),
            task: task_name.to_string(),
            metric: "auc".to_string(),
            k: None,
            value: auc_value,
            n_queries: n_queries_total,
            n_skipped: 0,
        });

        // NDCG over queries, gains = task engagement counts.
        let lists: Vec<RankedList> = groups
            .iter()
            .map(|(qid, group)| {
                RankedList::new(
                    qid.clone(),
                    group
                        .iter()
                        .map(|(r, s)| (r.item.item_id.clone(), s.for_task(task), r.gain(task)))
                        .collect(),
                )
            })
            .collect::<Result<_>>()?;
        for k in NDCG_KS {
            let agg = mean_ndcg(&lists, k)?;
            rows.push(MetricRow {
                model_variant: variant.to_string(),
                task: task_name.to_string(),
                metric: "ndcg".to_string(),
                k: Some(k),
                value: agg.mean,
                n_queries: agg.n_queries,
                n_skipped: agg.n_skipped,
            });
            for list in &lists {
                if let Some(v) = ndcg_at_k(&list.gains(), k)? {
                    per_query.push(PerQueryNdcg {
                        query_id: list.query_id.clone(),
                        task: task_name.to_string(),
                        k,
                        value: v,
                    });
                }
            }
        }
    }
    Ok(EvaluationReport { rows, per_query })
}

/// Impression-percentile grouping (0-25, 25-75, 75-100) of a scored test
/// set; each group is evaluated separately under a suffixed variant name.
pub fn evaluate_by_impression_percentile(
    variant: &str,
    records: &[EngagementRecord],
    scores: &[TransferredOutputs],
) -> Result<Vec<MetricRow>> {
    if records.len() != scores.len() {
        return Err(Error::dimension(
            "evaluate",
            format!("{} records vs {} scores", records.len(), scores.len()),
        ));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .impressions
            .cmp(&records[b].impressions)
            .then_with(|| records[a].query.query_id.cmp(&records[b].query.query_id))
            .then_with(|| records[a].item.item_id.cmp(&records[b].item.item_id))
    });
    let n = order.len();
    let cut_25 = n / 4;
    let cut_75 = 3 * n / 4;
    let groups: [(&str, &[usize]); 3] = [
        ("p0-25", &order[..cut_25]),
        ("p25-75", &order[cut_25..cut_75]),
        ("p75-100", &order[cut_75..]),
    ];
    let mut rows = Vec::new();
    for (suffix, idx) in groups {
        let sub_records: Vec<EngagementRecord> =
            idx.iter().map(|&i| records[i].clone()).collect();
        let sub_scores: Vec<TransferredOutputs> = idx.iter().map(|&i| scores[i]).collect();
        let report = evaluate(&format!("{variant}::{suffix}"), &sub_records, &sub_scores)?;
        rows.extend(report.rows);
    }
    Ok(rows)
}

const REPORT_HEADER: &str = "model_variant,task,metric,k,value,n_queries,n_skipped";

/// Writes the metrics report CSV.
pub fn write_metrics_csv(path: impl AsRef<std::path::Path>, rows: &[MetricRow]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        let value = if r.value.is_nan() {
            String::new()
        } else {
            format!("{}", r.value)
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.model_variant, r.task, r.metric, k, value, r.n_queries, r.n_skipped
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a metrics report produced by `write_metrics_csv`.
pub fn load_metrics_csv(path: impl AsRef<std::path::Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: display,
                line: 1,
                msg: "unexpected report header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                path: display,
                line: idx + 1,
                msg: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let parse_err = |msg: String| Error::Parse {
            path: display.clone(),
            line: idx + 1,
            msg,
        };
        rows.push(MetricRow {
            model_variant: fields[0].to_string(),
            task: fields[1].to_string(),
            metric: fields[2].to_string(),
            k: if fields[3].is_empty() {
                None
            } else {
                Some(fields[3].parse().map_err(|e| parse_err(format!("k: {e}")))?)
            },
            value: if fields[4].is_empty() {
                f64::NAN
            } else {
                fields[4].parse().map_err(|e| parse_err(format!("value: {e}")))?
            },
            n_queries: fields[5].parse().map_err(|e| parse_err(format!("n_queries: {e}")))?,
            n_skipped: fields[6].parse().map_err(|e| parse_err(format!("n_skipped: {e}")))?,
        });
    }
    Ok(rows)
}

/// Writes per-query NDCG values: query_id, task, k, value.
pub fn write_per_query_csv(
    path: impl AsRef<std::path::Path>,
    rows: &[PerQueryNdcg],
) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "query_id,task,k,value")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.query_id, r.task, r.k, r.value)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_per_query_csv(path: impl AsRef<std::path::Path>) -> Result<Vec<PerQueryNdcg>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "query_id,task,k,value")) => {}
        _ => {
            return Err(Error::Parse {
                path: display,
                line: 1,
                msg: "unexpected per-query header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: display,
                line: idx + 1,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse_err = |msg: String| Error::Parse {
            path: display.clone(),
            line: idx + 1,
            msg,
        };
        rows.push(PerQueryNdcg {
            query_id: fields[0].to_string(),
            task: fields[1].to_string(),
            k: fields[2].parse().map_err(|e| parse_err(format!("k: {e}")))?,
            value: fields[3].parse().map_err(|e| parse_err(format!("value: {e}")))?,
        });
    }
    Ok(rows)
}

/// Paired t-test between two runs' per-query NDCG values, per task and k.
/// Only queries present in both runs participate.
pub fn compare_runs(
    a: &[PerQueryNdcg],
    b: &[PerQueryNdcg],
) -> Result<Vec<(String, usize, crate::metrics::PairedTTest)>> {
    let mut out = Vec::new();
    for task in TASK_NAMES {
        for k in NDCG_KS {
            let index =
                |rows: &[PerQueryNdcg]| -> BTreeMap<String, f64> {
                    rows.iter()
                        .filter(|r| r.task == task && r.k == k)
                        .map(|r| (r.query_id.clone(), r.value))
                        .collect()
                };
            let map_a = index(a);
            let map_b = index(b);
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (qid, &va) in &map_a {
                if let Some(&vb) = map_b.get(qid) {
                    xs.push(va);
                    ys.push(vb);
                }
            }
            if xs.len() >= 2 {
                out.push((task.to_string(), k, crate::metrics::paired_t_test(&xs, &ys)?));
            }
        }
    }
    Ok(out)
}

/// The final ranking score for one task: AUC/NDCG read the transferred
/// output directly.
pub fn oracle_scores(records: &[EngagementRecord]) -> Result<Vec<TransferredOutputs>> {
    records
        .iter()
        .map(|r| {
            let gt = r.ground_truth.as_ref().ok_or_else(|| {
                Error::Contract("oracle scoring needs ground-truth columns".into())
            })?;
            Ok(TransferredOutputs {
                click: gt.p_click,
                atc: gt.p_click * gt.p_atc,
                purchase: gt.p_click * gt.p_atc * gt.p_purchase,
            })
        })
        .collect()
}

/// Number of expected rows in one evaluation: tasks x (auc + ndcg ks).
pub fn rows_per_variant() -> usize {
    TASKS * (1 + NDCG_KS.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FunnelParams;
    use approx::assert_abs_diff_eq;

    fn scored_dataset(seed: u64) -> (Vec<EngagementRecord>, Vec<TransferredOutputs>) {
        let records = crate::data::generate(&FunnelParams {
            n_queries: 30,
            n_items: 100,
            candidates_per_query: 8,
            feature_count: 4,
            seed,
            ..FunnelParams::default()
        })
        .unwrap();
        let scores = oracle_scores(&records).unwrap();
        (records, scores)
    }

    #[test]
    fn report_has_expected_row_grid() {
        let (records, scores) = scored_dataset(5);
        let report = evaluate("oracle", &records, &scores).unwrap();
        assert_eq!(report.rows.len(), rows_per_variant());
        for task in TASK_NAMES {
            assert!(report
                .rows
                .iter()
                .any(|r| r.task == task && r.metric == "auc"));
            for k in NDCG_KS {
                assert!(report
                    .rows
                    .iter()
                    .any(|r| r.task == task && r.metric == "ndcg" && r.k == Some(k)));
            }
        }
    }

    #[test]
    fn oracle_scores_beat_random_scores() {
        let (records, oracle) = scored_dataset(6);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let random: Vec<TransferredOutputs> = records
            .iter()
            .map(|_| {
                let c: f64 = rng.gen_range(0.0..1.0);
                let a = c * rng.gen_range(0.0..1.0);
                let p = a * rng.gen_range(0.0..1.0);
                TransferredOutputs {
                    click: c,
                    atc: a,
                    purchase: p,
                }
            })
            .collect();
        let r_oracle = evaluate("oracle", &records, &oracle).unwrap();
        let r_random = evaluate("random", &records, &random).unwrap();
        let auc_of = |rows: &[MetricRow], task: &str| {
            rows.iter()
                .find(|r| r.task == task && r.metric == "auc")
                .unwrap()
                .value
        };
        for task in TASK_NAMES {
            assert!(
                auc_of(&r_oracle.rows, task) > auc_of(&r_random.rows, task),
                "oracle should dominate random on {task}"
            );
        }
    }

    #[test]
    fn random_scores_have_auc_near_half_on_large_sets() {
        let records = crate::data::generate(&FunnelParams {
            n_queries: 500,
            n_items: 1000,
            candidates_per_query: 25,
            feature_count: 2,
            seed: 8,
            ..FunnelParams::default()
        })
        .unwrap();
        assert!(records.len() >= 10_000);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = records.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<f64> = records.iter().map(|r| r.label(0)).collect();
        let a = auc(&scores, &labels).unwrap();
        assert!((a - 0.5).abs() < 0.02, "random AUC {a}");
    }

    #[test]
    fn metrics_csv_round_trips_including_undefined() {
        let rows = vec![
            MetricRow {
                model_variant: "mlpr".into(),
                task: "click".into(),
                metric: "auc".into(),
                k: None,
                value: 0.8125,
                n_queries: 30,
                n_skipped: 0,
            },
            MetricRow {
                model_variant: "mlpr".into(),
                task: "purchase".into(),
                metric: "auc".into(),
                k: None,
                value: f64::NAN,
                n_queries: 30,
                n_skipped: 0,
            },
            MetricRow {
                model_variant: "mlpr".into(),
                task: "atc".into(),
                metric: "ndcg".into(),
                k: Some(5),
                value: 0.625,
                n_queries: 28,
                n_skipped: 2,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_metrics_csv(&path, &rows).unwrap();
        let back = load_metrics_csv(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0], rows[0]);
        assert!(back[1].value.is_nan());
        assert_eq!(back[2], rows[2]);
    }

    #[test]
    fn per_query_round_trip_and_self_comparison() {
        let (records, scores) = scored_dataset(9);
        let report = evaluate("oracle", &records, &scores).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("perquery.csv");
        write_per_query_csv(&path, &report.per_query).unwrap();
        let back = load_per_query_csv(&path).unwrap();
        assert_eq!(back, report.per_query);
        // A run compared against itself has mean diff 0 and p = 1.
        for (_, _, t) in compare_runs(&back, &report.per_query).unwrap() {
            assert_eq!(t.mean_diff, 0.0);
            assert_eq!(t.p_value, 1.0);
        }
    }

    #[test]
    fn ndcg1_not_asserted_leq_ndcg5_but_both_present() {
        let (records, scores) = scored_dataset(10);
        let report = evaluate("oracle", &records, &scores).unwrap();
        let ndcg_rows: Vec<&MetricRow> =
            report.rows.iter().filter(|r| r.metric == "ndcg").collect();
        assert_eq!(ndcg_rows.len(), TASKS * NDCG_KS.len());
    }

    #[test]
    fn percentile_grouping_partitions_records() {
        let (records, scores) = scored_dataset(11);
        let rows = evaluate_by_impression_percentile("m", &records, &scores).unwrap();
        assert_eq!(rows.len(), 3 * rows_per_variant());
        let n: usize = ["::p0-25", "::p25-75", "::p75-100"]
            .iter()
            .map(|suffix| {
                rows.iter()
                    .find(|r| r.model_variant.ends_with(suffix) && r.metric == "auc")
                    .map(|_| 1)
                    .unwrap_or(0)
            })
            .sum();
        assert_eq!(n, 3);
    }

    #[test]
    fn mean_aggregation_is_order_independent() {
        let (records, scores) = scored_dataset(12);
        let forward = evaluate("m", &records, &scores).unwrap();
        let mut rev_records = records.clone();
        let mut rev_scores = scores.clone();
        rev_records.reverse();
        rev_scores.reverse();
        let backward = evaluate("m", &rev_records, &rev_scores).unwrap();
        for (a, b) in forward.rows.iter().zip(backward.rows.iter()) {
            if a.value.is_nan() {
                assert!(b.value.is_nan());
            } else {
                assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-12);
            }
        }
    }
}
