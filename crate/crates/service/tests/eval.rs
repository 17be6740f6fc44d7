mod common;

use std::collections::{BTreeSet, HashMap};

use vsearch::index::QueryBudget;
use vsearch::model::{squared_l2, Category, Item, NUM_CATEGORIES};
use vsearch_service::config::BuildSettings;
use vsearch_service::eval::{evaluate, summarize, EvalOptions, EvalQuery, Outcome, IDENTICAL_KS, LINEAR_KS};

use common::*;

/// Exhaustive top-`k` of one category, ordered by (distance, id).
fn brute_force(items: &[Item], q: &[f32], category: Category, k: usize) -> Vec<u64> {
    let mut all: Vec<(f64, u64)> = items
        .iter()
        .filter(|it| it.category == category)
        .map(|it| (squared_l2(it.embedding.values(), q).sqrt(), it.id))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, id)| id).collect()
}

fn queries(inv: &vsearch::synthetic::Inventory, seed: u64, n: usize) -> Vec<EvalQuery> {
    inv.queries(seed, n).unwrap().iter().map(EvalQuery::from).collect()
}

#[test]
fn exhaustive_budget_reaches_full_linear_recall() {
    let inv = small_inventory(51, 2000, 32);
    for shards in [1, 3] {
        let (d, _) = deploy(&inv.items, &scores_map(&inv), &settings(shards, 1), true);
        let (report, outcomes) = evaluate(&d, &queries(&inv, 52, 150), &EvalOptions::default()).unwrap();
        assert!(report.linear_recall.iter().all(|r| r.value == 1.0), "{report:?}");
        for (o, q) in outcomes.iter().zip(queries(&inv, 52, 150)) {
            assert_eq!(o.linear, brute_force(&inv.items, &q.vec, o.predicted, 60));
        }
    }
}

#[test]
fn querying_with_indexed_items_gives_perfect_identical_recall() {
    let inv = small_inventory(53, 1500, 32);
    let (d, _) = deploy(&inv.items, &scores_map(&inv), &settings(2, 1), false);
    let queries: Vec<EvalQuery> = inv
        .items
        .iter()
        .step_by(5)
        .zip(inv.model_scores.iter().step_by(5))
        .map(|(it, s)| EvalQuery {
            id: it.id,
            vec: it.embedding.values().to_vec(),
            category: it.category,
            identical: vec![it.id],
            model_scores: Some(s.iter().map(|&v| f64::from(v)).collect()),
        })
        .collect();
    let (report, outcomes) = evaluate(&d, &queries, &EvalOptions::default()).unwrap();
    let correct: Vec<&Outcome> = outcomes.iter().filter(|o| o.truth == o.predicted).collect();
    assert!(correct.iter().all(|o| o.results[0] == o.identical[0]));
    assert_eq!(report.accuracy_at_1.overall, 1.0, "{:?}", report.accuracy_at_1);
    assert_eq!(report.identical_recall[0].value, 1.0);
}

/// Metrics recomputed from outcomes with set arithmetic.
fn oracle_metrics(outcomes: &[Outcome]) -> (Vec<f64>, f64, f64, Vec<f64>) {
    let n = outcomes.len() as f64;
    let identical = IDENTICAL_KS
        .iter()
        .map(|&k| {
            outcomes
                .iter()
                .filter(|o| {
                    let top: BTreeSet<u64> = o.results.iter().take(k).copied().collect();
                    o.identical.iter().any(|id| top.contains(id))
                })
                .count() as f64
                / n
        })
        .collect();
    let overall = outcomes.iter().filter(|o| o.truth == o.predicted).count() as f64 / n;
    let mut by_cat: HashMap<Category, (usize, usize)> = HashMap::new();
    for o in outcomes {
        let e = by_cat.entry(o.truth).or_default();
        e.0 += usize::from(o.truth == o.predicted);
        e.1 += 1;
    }
    let average = by_cat.values().map(|&(c, t)| c as f64 / t as f64).sum::<f64>() / by_cat.len() as f64;
    let linear = LINEAR_KS
        .iter()
        .map(|&k| {
            outcomes
                .iter()
                .map(|o| {
                    let want: BTreeSet<u64> = o.linear.iter().take(k).copied().collect();
                    let got: BTreeSet<u64> = o.retrieval.iter().take(k).copied().collect();
                    if want.is_empty() {
                        1.0
                    } else {
                        want.intersection(&got).count() as f64 / want.len() as f64
                    }
                })
                .sum::<f64>()
                / n
        })
        .collect();
    (identical, overall, average, linear)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn reported_metrics_match_an_independent_recount() {
    let inv = small_inventory(54, 2500, 32);
    let s = BuildSettings {
        budget: QueryBudget { candidate_budget: 300, k_coarse: 150, k_final: 60 },
        ..settings(2, 1)
    };
    let (d, _) = deploy(&inv.items, &scores_map(&inv), &s, true);
    let (report, outcomes) = evaluate(&d, &queries(&inv, 55, 300), &EvalOptions::default()).unwrap();
    // the linear reference ignores the configured budget
    for (o, q) in outcomes.iter().zip(queries(&inv, 55, 300)) {
        assert_eq!(o.linear, brute_force(&inv.items, &q.vec, o.predicted, 60));
    }
    assert!(report.linear_recall[2].value < 1.0);
    for opts in [
        EvalOptions::default(),
        EvalOptions { skip_rerank: true, ignore_model_scores: true },
    ] {
        let (report, outcomes) = evaluate(&d, &queries(&inv, 55, 300), &opts).unwrap();
        let (identical, overall, average, linear) = oracle_metrics(&outcomes);
        assert_eq!(report.queries, 300);
        for (r, v) in report.identical_recall.iter().zip(&identical) {
            assert!(close(r.value, *v), "{r:?} vs {v}");
        }
        for (r, v) in report.linear_recall.iter().zip(&linear) {
            assert!(close(r.value, *v), "{r:?} vs {v}");
        }
        assert!(close(report.accuracy_at_1.overall, overall));
        assert!(close(report.accuracy_at_1.average, average));
        assert_eq!(report.accuracy_at_1.per_category.len(), NUM_CATEGORIES);
        assert_eq!(summarize(&outcomes, None), report);

        // recall never decreases in K and stays a fraction
        let values: Vec<f64> = report.identical_recall.iter().map(|r| r.value).collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
        assert!(report
            .linear_recall
            .iter()
            .chain(&report.identical_recall)
            .all(|r| (0.0..=1.0).contains(&r.value)));
        let lat = report.latency.unwrap();
        assert!(lat.p50_ms <= lat.p95_ms && lat.p95_ms <= lat.p99_ms && lat.p99_ms <= lat.max_ms);
    }
}

#[test]
fn linear_recall_grows_along_a_budget_ladder() {
    let inv = small_inventory(56, 3000, 32);
    let qs = queries(&inv, 57, 200);
    let mut per_query_prev: Option<Vec<(Category, usize)>> = None;
    let mut prev = 0.0;
    for budget in [60, 120, 400, 1200, 3000] {
        let s = BuildSettings {
            budget: QueryBudget { candidate_budget: budget, k_coarse: budget, k_final: 60 },
            ..settings(1, 1)
        };
        let (d, _) = deploy(&inv.items, &scores_map(&inv), &s, false);
        let (report, outcomes) = evaluate(&d, &qs, &EvalOptions { skip_rerank: true, ..Default::default() }).unwrap();
        let r60 = report.linear_recall.iter().find(|r| r.k == 60).unwrap().value;
        assert!(r60 + 1e-12 >= prev, "budget {budget}: {r60} < {prev}");
        prev = r60;
        let hits: Vec<(Category, usize)> = outcomes
            .iter()
            .map(|o| (o.predicted, o.retrieval.iter().filter(|id| o.linear.contains(id)).count()))
            .collect();
        // a larger budget gathers a superset, so within an unchanged
        // category no query can lose a true neighbour
        if let Some(p) = &per_query_prev {
            assert!(hits.iter().zip(p).all(|(h, p)| h.0 != p.0 || h.1 >= p.1));
        }
        per_query_prev = Some(hits);
    }
    assert_eq!(prev, 1.0);
}
