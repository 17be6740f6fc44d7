use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsearch::model::{QualityMeta, RankedEntry, RankedList};
use vsearch::rerank::{
    auc, fit, quality_features, rerank_top, FitConfig, Logistic, Node, RerankConfig, TreeEnsemble,
    QUALITY_FEATURES,
};
use vsearch::synthetic::{quality_samples, random_quality};

fn random_tree(rng: &mut ChaCha8Rng, depth: usize) -> Node {
    if depth == 0 || rng.gen_bool(0.2) {
        Node::Leaf { value: rng.gen_range(-2.0..2.0) }
    } else {
        Node::Split {
            feature: rng.gen_range(0..3),
            threshold: rng.gen_range(0.0..1.0),
            left: Box::new(random_tree(rng, depth - 1)),
            right: Box::new(random_tree(rng, depth - 1)),
        }
    }
}

/// Recursive evaluation straight from the node definitions.
fn naive(node: &Node, x: &[f64]) -> f64 {
    match node {
        Node::Leaf { value } => *value,
        Node::Split { feature, threshold, left, right } => {
            if x[*feature] > *threshold {
                naive(right, x)
            } else {
                naive(left, x)
            }
        }
    }
}

#[test]
fn raw_scores_match_naive_tree_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let mut e = TreeEnsemble::empty(&QUALITY_FEATURES, rng.gen_range(0.01..1.0), Logistic { a: 1.5, b: -0.2 });
        e.trees = (0..rng.gen_range(0..20)).map(|_| random_tree(&mut rng, 4)).collect();
        e.validate(4).unwrap();
        let x = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let f: HashMap<String, f64> = QUALITY_FEATURES.iter().map(|s| s.to_string()).zip(x).collect();
        let want: f64 = e.trees.iter().map(|t| e.shrinkage * naive(t, &x)).sum();
        let got = e.score(&f).unwrap();
        assert!((got.raw - want).abs() <= 1e-12);
        assert!((0.0..=1.0).contains(&got.scaled));
    }
}

fn accuracy(e: &TreeEnsemble, rows: &[(HashMap<String, f64>, bool)], idx: &[usize]) -> f64 {
    let hits = idx
        .iter()
        .filter(|&&i| (e.score(&rows[i].0).unwrap().scaled >= 0.5) == rows[i].1)
        .count();
    hits as f64 / idx.len() as f64
}

/// Integer sales volumes with the label a threshold on them.
fn separable(seed: u64, n: usize) -> Vec<(HashMap<String, f64>, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let q = QualityMeta {
                sales_volume: rng.gen_range(0..=200),
                ..random_quality(&mut rng)
            };
            (quality_features(&q), q.sales_volume > 100)
        })
        .collect()
}

#[test]
fn separable_fixture_is_recovered_within_five_rounds() {
    for seed in 0..5 {
        let rows = separable(seed, 2000);
        for rounds in 1..=5 {
            let report = fit(&rows, &QUALITY_FEATURES, &FitConfig { rounds, seed, ..Default::default() }).unwrap();
            assert_eq!(accuracy(&report.ensemble, &rows, &report.holdout_rows), 1.0, "seed {seed} rounds {rounds}");
        }
    }
}

#[test]
fn random_labels_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<(HashMap<String, f64>, bool)> = (0..3000)
        .map(|_| (quality_features(&random_quality(&mut rng)), rng.gen_bool(0.5)))
        .collect();
    let report = fit(&rows, &QUALITY_FEATURES, &FitConfig::default()).unwrap();
    let scores: Vec<f64> = report.holdout_rows.iter().map(|&i| report.ensemble.score(&rows[i].0).unwrap().raw).collect();
    let labels: Vec<bool> = report.holdout_rows.iter().map(|&i| rows[i].1).collect();
    let a = auc(&scores, &labels).unwrap();
    assert!((0.4..=0.6).contains(&a), "auc {a}");
}

#[test]
fn utility_labels_are_learnable_and_fit_is_deterministic() {
    let rows: Vec<(HashMap<String, f64>, bool)> = quality_samples(4, 3000, 0.5)
        .into_iter()
        .map(|(q, y)| (quality_features(&q), y))
        .collect();
    let a = fit(&rows, &QUALITY_FEATURES, &FitConfig::default()).unwrap();
    let b = fit(&rows, &QUALITY_FEATURES, &FitConfig::default()).unwrap();
    assert_eq!(a.ensemble.to_json().unwrap(), b.ensemble.to_json().unwrap());
    a.ensemble.validate(4).unwrap();
    let scores: Vec<f64> = a.holdout_rows.iter().map(|&i| a.ensemble.score(&rows[i].0).unwrap().raw).collect();
    let labels: Vec<bool> = a.holdout_rows.iter().map(|&i| rows[i].1).collect();
    assert!(auc(&scores, &labels).unwrap() > 0.8);
}

/// Pairwise-comparison AUC.
fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

#[test]
fn auc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.gen_range(2..60);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        assert!((auc(&scores, &labels).unwrap() - auc_oracle(&scores, &labels)).abs() < 1e-12);
    }
}

fn quality_stump() -> TreeEnsemble {
    let mut e = TreeEnsemble::empty(&QUALITY_FEATURES, 1.0, Logistic::default());
    e.trees.push(Node::Leaf { value: 0.0 });
    e.trees.push(Node::Split {
        feature: 0,
        threshold: 50.0,
        left: Box::new(Node::Split {
            feature: 0,
            threshold: 20.0,
            left: Box::new(Node::Leaf { value: -1.0 }),
            right: Box::new(Node::Leaf { value: 0.0 }),
        }),
        right: Box::new(Node::Leaf { value: 1.0 }),
    });
    e
}

#[test]
fn beta_zero_follows_quality() {
    // quality rises with position, so the order reverses
    let list = RankedList::from_unsorted(
        [(7u64, 0.1), (3, 0.2), (9, 0.3)].iter().map(|&(id, d)| RankedEntry::new(id, d)).collect(),
    )
    .unwrap();
    let sales = HashMap::from([(7u64, 10u64), (3, 30), (9, 90)]);
    let out = rerank_top(
        &list,
        |id| Some(QualityMeta { sales_volume: sales[&id], ..Default::default() }),
        &quality_stump(),
        &RerankConfig { beta: 0.0, top_n: 60 },
    )
    .unwrap();
    assert_eq!(out.ids(), vec![9, 3, 7]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rerank_is_a_permutation_of_top_n(seed in any::<u64>(), n in 0usize..120, beta in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let list = RankedList::from_unsorted(
            (0..n as u64).map(|i| RankedEntry::new(i * 13 + 1, rng.gen_range(0.0..2.0))).collect(),
        ).unwrap();
        let metas: HashMap<u64, QualityMeta> = list.ids().into_iter().map(|id| (id, random_quality(&mut rng))).collect();
        let cfg = RerankConfig { beta, top_n: 60 };
        let out = rerank_top(&list, |id| metas.get(&id).copied(), &quality_stump(), &cfg).unwrap();
        let mut a = out.ids();
        let mut b: Vec<u64> = list.ids().into_iter().take(60).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        for w in out.entries().windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
    }
}
