//! Evaluation harness: category accuracy, identical-item recall, recall
//! against an exhaustive scan, optional localization IOU, and latency.
//!
//! Metrics are computed from per-query [`Outcome`]s so that they can be
//! checked independently of how the outcomes were produced.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use vsearch::model::{Category, NUM_CATEGORIES};
use vsearch::ranking::train::BoxReport;
use vsearch::synthetic::LabeledQuery;

use crate::deploy::{Deployment, QueryRequest};
use crate::error::ServiceResult;

pub const IDENTICAL_KS: [usize; 3] = [1, 4, 20];
pub const LINEAR_KS: [usize; 3] = [1, 10, 60];

/// Queries JSONL line: a query with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub id: u64,
    pub vec: Vec<f32>,
    pub category: Category,
    /// Inventory listings of the queried product.
    pub identical: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_scores: Option<Vec<f64>>,
}

impl From<&LabeledQuery> for EvalQuery {
    fn from(q: &LabeledQuery) -> Self {
        Self {
            id: q.id,
            vec: q.embedding.values().to_vec(),
            category: q.category,
            identical: q.identical.clone(),
            model_scores: Some(q.model_scores.iter().map(|&s| f64::from(s)).collect()),
        }
    }
}

/// Raw result of one evaluated query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub truth: Category,
    pub predicted: Category,
    /// Final result ids, in response order.
    pub results: Vec<u64>,
    /// Retrieval ids before re-ranking.
    pub retrieval: Vec<u64>,
    /// Exhaustive-scan ids within the predicted category.
    pub linear: Vec<u64>,
    pub identical: Vec<u64>,
    pub latency_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    /// `None` for categories without queries.
    pub per_category: Vec<Option<f64>>,
    /// Mean over categories that have queries.
    pub average: f64,
    /// Fraction of all queries.
    pub overall: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub accuracy_at_1: CategoryAccuracy,
    pub identical_recall: Vec<RecallAt>,
    pub linear_recall: Vec<RecallAt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<BoxReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<Latency>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Whether any identical item appears among the first `k` results.
pub fn identical_hit(results: &[u64], identical: &[u64], k: usize) -> bool {
    results.iter().take(k).any(|id| identical.contains(id))
}

/// `|engine[..k] ∩ linear[..k]| / min(k, |linear|)`; a query whose linear
/// list is empty has nothing to miss and scores 1.
pub fn linear_recall(engine: &[u64], linear: &[u64], k: usize) -> f64 {
    let reference = &linear[..linear.len().min(k)];
    if reference.is_empty() {
        return 1.0;
    }
    let hits = engine.iter().take(k).filter(|id| reference.contains(id)).count();
    hits as f64 / reference.len() as f64
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn latency(samples_ms: &[f64]) -> Option<Latency> {
    if samples_ms.is_empty() {
        return None;
    }
    let mut s = samples_ms.to_vec();
    s.sort_by(f64::total_cmp);
    Some(Latency {
        p50_ms: percentile(&s, 50.0),
        p95_ms: percentile(&s, 95.0),
        p99_ms: percentile(&s, 99.0),
        mean_ms: mean(s.iter().copied()),
        max_ms: s[s.len() - 1],
    })
}

pub fn summarize(outcomes: &[Outcome], iou: Option<BoxReport>) -> EvalReport {
    let per_category: Vec<Option<f64>> = (0..NUM_CATEGORIES)
        .map(|c| {
            let of_c: Vec<&Outcome> = outcomes.iter().filter(|o| o.truth.index() == c).collect();
            (!of_c.is_empty()).then(|| mean(of_c.iter().map(|o| f64::from(u8::from(o.predicted == o.truth)))))
        })
        .collect();
    let accuracy_at_1 = CategoryAccuracy {
        average: mean(per_category.iter().flatten().copied()),
        overall: mean(outcomes.iter().map(|o| f64::from(u8::from(o.predicted == o.truth)))),
        per_category,
    };
    let identical_recall = IDENTICAL_KS
        .iter()
        .map(|&k| RecallAt {
            k,
            value: mean(outcomes.iter().map(|o| f64::from(u8::from(identical_hit(&o.results, &o.identical, k))))),
        })
        .collect();
    let linear_recall = LINEAR_KS
        .iter()
        .map(|&k| RecallAt {
            k,
            value: mean(outcomes.iter().map(|o| linear_recall(&o.retrieval, &o.linear, k))),
        })
        .collect();
    let latencies: Vec<f64> = outcomes.iter().map(|o| o.latency_ms).collect();
    EvalReport {
        queries: outcomes.len(),
        accuracy_at_1,
        identical_recall,
        linear_recall,
        iou,
        latency: latency(&latencies),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub skip_rerank: bool,
    /// Leave out the classifier scores carried by the queries, so category
    /// prediction falls back to the deployment's centroid classifier.
    pub ignore_model_scores: bool,
}

/// Runs every query through the pipeline and scores the outcomes.
pub fn evaluate(
    deployment: &Deployment,
    queries: &[EvalQuery],
    opts: &EvalOptions,
) -> ServiceResult<(EvalReport, Vec<Outcome>)> {
    let k_linear = LINEAR_KS.iter().copied().max().unwrap_or(0);
    let mut outcomes = Vec::with_capacity(queries.len());
    for q in queries {
        let req = QueryRequest {
            embedding: q.vec.clone(),
            model_scores: if opts.ignore_model_scores { None } else { q.model_scores.clone() },
            skip_rerank: opts.skip_rerank,
            ..Default::default()
        };
        let start = Instant::now();
        let exec = deployment.execute(&req)?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        let predicted = exec.response.category;
        let linear = deployment.linear(&q.vec, predicted, k_linear)?;
        outcomes.push(Outcome {
            truth: q.category,
            predicted,
            results: exec.response.results.iter().map(|r| r.id).collect(),
            retrieval: exec.retrieval.ids(),
            linear: linear.ids(),
            identical: q.identical.clone(),
            latency_ms,
        });
    }
    Ok((summarize(&outcomes, None), outcomes))
}

/// Aligned two-column text rendering of a report.
pub fn table(report: &EvalReport) -> String {
    let mut rows: Vec<(String, String)> = vec![("queries".into(), report.queries.to_string())];
    let acc = &report.accuracy_at_1;
    rows.push(("Accuracy@1 (average)".into(), format!("{:.4}", acc.average)));
    rows.push(("Accuracy@1 (overall)".into(), format!("{:.4}", acc.overall)));
    for (c, a) in acc.per_category.iter().enumerate() {
        if let Some(a) = a {
            rows.push((format!("Accuracy@1 category {c}"), format!("{a:.4}")));
        }
    }
    for r in &report.identical_recall {
        rows.push((format!("Identical Recall@{}", r.k), format!("{:.4}", r.value)));
    }
    for r in &report.linear_recall {
        rows.push((format!("Linear Recall@{}", r.k), format!("{:.4}", r.value)));
    }
    if let Some(b) = &report.iou {
        rows.push(("IOU mean".into(), format!("{:.4}", b.mean_iou)));
        rows.push(("IOU@0.5".into(), format!("{:.4}", b.iou_at_05)));
        rows.push(("IOU@0.7".into(), format!("{:.4}", b.iou_at_07)));
    }
    if let Some(l) = &report.latency {
        rows.push(("latency p50 (ms)".into(), format!("{:.3}", l.p50_ms)));
        rows.push(("latency p95 (ms)".into(), format!("{:.3}", l.p95_ms)));
        rows.push(("latency p99 (ms)".into(), format!("{:.3}", l.p99_ms)));
    }
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<width$}  {v:>10}");
    }
    out
}
