#![allow(dead_code)]

use std::collections::BTreeMap;

use vsearch::model::Item;
use vsearch::rerank::{fit, quality_features, FitConfig, TreeEnsemble, QUALITY_FEATURES};
use vsearch::synthetic::{inventory, quality_samples, Inventory, InventoryConfig};
use vsearch_service::config::BuildSettings;
use vsearch_service::deploy::Deployment;
use vsearch::index::IndexSnapshot;

pub fn small_inventory(seed: u64, items: usize, dim: usize) -> Inventory {
    inventory(&InventoryConfig { seed, items, dim, ..Default::default() }).unwrap()
}

pub fn scores_map(inv: &Inventory) -> BTreeMap<u64, Vec<f32>> {
    inv.items.iter().zip(&inv.model_scores).map(|(it, s)| (it.id, s.clone())).collect()
}

pub fn ensemble(seed: u64) -> TreeEnsemble {
    let rows: Vec<_> = quality_samples(seed, 2000, 0.5)
        .into_iter()
        .map(|(q, y)| (quality_features(&q), y))
        .collect();
    fit(&rows, &QUALITY_FEATURES, &FitConfig { rounds: 20, seed, ..Default::default() })
        .unwrap()
        .ensemble
}

pub fn settings(shards: usize, replicas: usize) -> BuildSettings {
    BuildSettings { shards, replicas, validation_items: 200, ..Default::default() }
}

pub fn deploy(items: &[Item], scores: &BTreeMap<u64, Vec<f32>>, s: &BuildSettings, with_ensemble: bool) -> (Deployment, Vec<IndexSnapshot>) {
    Deployment::build(items, scores, s, with_ensemble.then(|| ensemble(7))).unwrap()
}
