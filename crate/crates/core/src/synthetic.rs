//! Seeded fixture generators.
//!
//! The inventory is a three-level mixture: category centres, product offsets
//! around them, and listings of the same product scattered tightly around
//! the product point. Listings of one product are "identical items" for
//! recall purposes. All generators are deterministic in their seed.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    nearest_neighbors, search_based_scores, CategoryDistribution, FusionSample, ReferencePair,
    WeightParams,
};
use crate::mining::{ClickLogRecord, FeatureChannels};
use crate::model::{Category, Embedding, Item, QualityMeta, NUM_CATEGORIES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InventoryConfig {
    pub seed: u64,
    pub items: usize,
    pub dim: usize,
    pub items_per_product: usize,
    /// Norm of the offset of a product from its category centre.
    pub product_spread: f64,
    /// Norm of a listing's offset from its product point.
    pub item_noise: f64,
    /// Probability that the synthetic classifier ranks the true category first.
    pub model_accuracy: f64,
}

impl Default for InventoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            items: 10_000,
            dim: 512,
            items_per_product: 4,
            product_spread: 0.8,
            item_noise: 0.15,
            model_accuracy: 0.85,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Inventory {
    pub items: Vec<Item>,
    /// Product index of each item, aligned with `items`.
    pub product_of: Vec<usize>,
    /// Synthetic classifier scores per item, aligned with `items`.
    pub model_scores: Vec<Vec<f32>>,
    /// Un-normalized product points, used to draw queries.
    products: Vec<(Category, Vec<f64>)>,
    noise: f64,
    model_accuracy: f64,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Vec<f64> {
    let scale = norm / (dim as f64).sqrt();
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn embed(v: &[f64]) -> Result<Embedding> {
    Embedding::normalized(v.iter().map(|&x| x as f32).collect())
}

fn jitter(rng: &mut ChaCha8Rng, base: &[f64], norm: f64) -> Vec<f64> {
    let n = gaussian(rng, base.len(), norm);
    base.iter().zip(n).map(|(a, b)| a + b).collect()
}

/// Classifier scores that favour `truth` with probability `accuracy`,
/// otherwise a random other category.
pub fn synthetic_model_scores(rng: &mut ChaCha8Rng, truth: Category, accuracy: f64) -> Vec<f32> {
    let top = if rng.gen_bool(accuracy.clamp(0.0, 1.0)) {
        truth.index()
    } else {
        let mut c = rng.gen_range(0..NUM_CATEGORIES - 1);
        if c >= truth.index() {
            c += 1;
        }
        c
    };
    let mut logits: Vec<f64> = (0..NUM_CATEGORIES).map(|_| rng.gen_range(0.0..1.0)).collect();
    logits[top] += 2.0;
    if top != truth.index() {
        // the true category stays a plausible runner-up
        logits[truth.index()] += 1.0;
    }
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| (l.exp() / z) as f32).collect()
}

pub fn inventory(cfg: &InventoryConfig) -> Result<Inventory> {
    if cfg.dim == 0 || cfg.items_per_product == 0 {
        return Err(Error::InvalidParam("dim and items_per_product must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centres: Vec<Vec<f64>> = (0..NUM_CATEGORIES)
        .map(|_| gaussian(&mut rng, cfg.dim, 1.0))
        .collect();
    let product_count = cfg.items.div_ceil(cfg.items_per_product);
    let products: Vec<(Category, Vec<f64>)> = (0..product_count)
        .map(|p| {
            let c = p % NUM_CATEGORIES;
            let point = jitter(&mut rng, &centres[c], cfg.product_spread);
            (Category::new(c).expect("in range"), point)
        })
        .collect();

    let mut items = Vec::with_capacity(cfg.items);
    let mut product_of = Vec::with_capacity(cfg.items);
    let mut model_scores = Vec::with_capacity(cfg.items);
    for i in 0..cfg.items {
        let p = i / cfg.items_per_product;
        let (category, point) = &products[p];
        let embedding = embed(&jitter(&mut rng, point, cfg.item_noise))?;
        items.push(Item {
            id: i as u64 + 1,
            category: *category,
            embedding,
            quality: random_quality(&mut rng),
        });
        product_of.push(p);
        model_scores.push(synthetic_model_scores(&mut rng, *category, cfg.model_accuracy));
    }
    Ok(Inventory {
        items,
        product_of,
        model_scores,
        products,
        noise: cfg.item_noise,
        model_accuracy: cfg.model_accuracy,
    })
}

pub fn random_quality(rng: &mut ChaCha8Rng) -> QualityMeta {
    let sales: f64 = rng.gen_range(0.0..10.0);
    QualityMeta {
        sales_volume: sales.exp().floor() as u64,
        percent_conversion: rng.gen_range(0.0..0.3),
        applause_rate: rng.gen_range(0.5..1.0),
    }
}

/// A query with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub id: u64,
    pub embedding: Embedding,
    pub category: Category,
    /// Listings of the queried product.
    pub identical: Vec<u64>,
    pub model_scores: Vec<f32>,
}

impl Inventory {
    /// Item ids grouped by product.
    pub fn products(&self) -> Vec<Vec<u64>> {
        let mut out = vec![Vec::new(); self.products.len()];
        for (it, &p) in self.items.iter().zip(&self.product_of) {
            out[p].push(it.id);
        }
        out
    }

    /// Queries photographed from random inventory products: a fresh draw
    /// around the product point with the listing noise.
    pub fn queries(&self, seed: u64, count: usize) -> Result<Vec<LabeledQuery>> {
        if self.items.is_empty() {
            return Err(Error::EmptyInput("inventory is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let listings = self.products();
        let stocked: Vec<usize> = (0..listings.len()).filter(|&p| !listings[p].is_empty()).collect();
        (0..count)
            .map(|q| {
                let p = *stocked.choose(&mut rng).expect("non-empty inventory");
                let (category, point) = &self.products[p];
                let embedding = embed(&jitter(&mut rng, point, self.noise))?;
                Ok(LabeledQuery {
                    id: q as u64,
                    embedding,
                    category: *category,
                    identical: listings[p].clone(),
                    model_scores: synthetic_model_scores(&mut rng, *category, self.model_accuracy),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClickLogConfig {
    pub seed: u64,
    pub records: usize,
    pub returned: usize,
    /// Probability a returned listing of the queried product is clicked.
    pub click_rate: f64,
    /// Probability an unrelated returned listing is clicked anyway.
    pub noise_click_rate: f64,
}

impl Default for ClickLogConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            records: 1000,
            returned: 20,
            click_rate: 0.8,
            noise_click_rate: 0.05,
        }
    }
}

/// Page-view records over the inventory plus two feature channels: the
/// listing embeddings themselves and a noisier second view of them.
pub fn click_logs(inv: &Inventory, cfg: &ClickLogConfig) -> Result<(Vec<ClickLogRecord>, FeatureChannels)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut local = HashMap::new();
    let mut second = HashMap::new();
    for it in &inv.items {
        let v: Vec<f64> = it.embedding.values().iter().map(|&x| f64::from(x)).collect();
        local.insert(it.id, it.embedding.clone());
        second.insert(it.id, embed(&jitter(&mut rng, &v, 0.3))?);
    }
    let mut channels = FeatureChannels::new();
    channels.add_channel("local", local);
    channels.add_channel("pretrained", second);

    let by_category: Vec<Vec<u64>> = (0..NUM_CATEGORIES)
        .map(|c| {
            inv.items
                .iter()
                .filter(|it| it.category.index() == c)
                .map(|it| it.id)
                .collect()
        })
        .collect();
    let queries = inv.queries(rng.gen(), cfg.records)?;
    let mut records = Vec::with_capacity(cfg.records);
    for q in queries {
        let mut returned: Vec<u64> = q.identical.clone();
        let pool = &by_category[q.category.index()];
        let mut guard = 0;
        while returned.len() < cfg.returned.max(q.identical.len()) && guard < 10 * cfg.returned {
            guard += 1;
            let id = if rng.gen_bool(0.7) && !pool.is_empty() {
                *pool.choose(&mut rng).expect("non-empty")
            } else {
                inv.items[rng.gen_range(0..inv.items.len())].id
            };
            if !returned.contains(&id) {
                returned.push(id);
            }
        }
        returned.shuffle(&mut rng);
        let clicked = returned
            .iter()
            .copied()
            .filter(|id| {
                let p = if q.identical.contains(id) { cfg.click_rate } else { cfg.noise_click_rate };
                rng.gen_bool(p)
            })
            .collect();
        let second_view = {
            let v: Vec<f64> = q.embedding.values().iter().map(|&x| f64::from(x)).collect();
            embed(&jitter(&mut rng, &v, 0.3))?
        };
        records.push(ClickLogRecord {
            query_id: q.id,
            query_features: vec![q.embedding, second_view],
            returned,
            clicked,
        });
    }
    Ok((records, channels))
}

/// Neighbour data whose labels are drawn from the kernel vote with a known
/// bandwidth: references carry random labels, and each validation point's
/// label is sampled from the vote of its `k` nearest references.
pub fn lambda_fixture(
    seed: u64,
    true_lambda: f64,
    references: usize,
    validation: usize,
    dim: usize,
    k: usize,
) -> Result<(Vec<(Embedding, Category)>, Vec<ReferencePair>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |rng: &mut ChaCha8Rng| -> Result<Embedding> {
        Embedding::new((0..dim).map(|_| rng.gen_range(0.0f32..1.0)).collect())
    };
    let reference = (0..references)
        .map(|_| {
            Ok(ReferencePair {
                x: point(&mut rng)?,
                y: Category::new(rng.gen_range(0..NUM_CATEGORIES))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = WeightParams {
        lambda: true_lambda,
        k_neighbors: k,
    };
    let mut val = Vec::with_capacity(validation);
    for _ in 0..validation {
        let x = point(&mut rng)?;
        let vote = search_based_scores(&nearest_neighbors(&x, &reference, k)?, &params)?;
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut label = vote.argmax();
        for (c, &p) in vote.probs().iter().enumerate() {
            acc += p;
            if u < acc {
                label = Category::new(c)?;
                break;
            }
        }
        val.push((x, label));
    }
    Ok((val, reference))
}

fn peaked(top: Category, runner_up: Category, top_mass: f64) -> CategoryDistribution {
    let mut probs = [0.0; NUM_CATEGORIES];
    let rest = (1.0 - top_mass) * 0.2 / (NUM_CATEGORIES - 2) as f64;
    for (i, p) in probs.iter_mut().enumerate() {
        *p = rest;
        if i == top.index() {
            *p = top_mass;
        } else if i == runner_up.index() {
            *p = (1.0 - top_mass) * 0.8;
        }
    }
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    CategoryDistribution::new(probs).expect("normalized")
}

/// Fusion samples where the classifier and the neighbour vote err on
/// disjoint subsets. On a fraction `model_error` of samples the classifier is
/// weakly wrong while the vote is confidently right; on a disjoint fraction
/// `search_error` it is the other way round.
pub fn confusion_fixture(
    seed: u64,
    samples: usize,
    model_error: f64,
    search_error: f64,
) -> Result<Vec<FusionSample>> {
    if model_error + search_error > 1.0 || model_error < 0.0 || search_error < 0.0 {
        return Err(Error::InvalidParam("error rates must be disjoint fractions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_model = (samples as f64 * model_error).round() as usize;
    let n_search = (samples as f64 * search_error).round() as usize;
    let mut roles: Vec<u8> = (0..samples)
        .map(|i| if i < n_model { 1 } else if i < n_model + n_search { 2 } else { 0 })
        .collect();
    roles.shuffle(&mut rng);
    roles
        .into_iter()
        .map(|role| {
            let label = Category::new(rng.gen_range(0..NUM_CATEGORIES))?;
            let mut other = Category::new(rng.gen_range(0..NUM_CATEGORIES - 1))?;
            if other.index() >= label.index() {
                other = Category::new(other.index() + 1)?;
            }
            let confident = rng.gen_range(0.75..0.95);
            let weak = rng.gen_range(0.45..0.55);
            let (model, search) = match role {
                1 => (peaked(other, label, weak), peaked(label, other, confident)),
                2 => (peaked(label, other, confident), peaked(other, label, weak)),
                _ => (peaked(label, other, confident), peaked(label, other, confident)),
            };
            Ok(FusionSample { model, search, label })
        })
        .collect()
}

/// Ground-truth click utility of a listing's quality metadata.
pub fn quality_utility(q: &QualityMeta) -> f64 {
    0.4 * (q.sales_volume as f64).ln_1p() + 12.0 * f64::from(q.percent_conversion)
        + 3.0 * f64::from(q.applause_rate)
        - 6.0
}

/// Synthetic click labels: `P(click) = logistic(utility / temperature)`.
pub fn quality_samples(seed: u64, n: usize, temperature: f64) -> Vec<(QualityMeta, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let q = random_quality(&mut rng);
            let p = 1.0 / (1.0 + (-quality_utility(&q) / temperature).exp());
            (q, rng.gen_bool(p))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::fused_accuracy;

    fn small() -> Inventory {
        inventory(&InventoryConfig { items: 200, dim: 32, ..Default::default() }).unwrap()
    }

    #[test]
    fn inventory_is_deterministic_and_grouped() {
        let a = small();
        let b = small();
        assert_eq!(a.items, b.items);
        assert_eq!(a.model_scores, b.model_scores);
        assert_eq!(a.products().len(), 50);
        assert!(a.items.iter().all(|it| it.embedding.is_normalized()));
    }

    #[test]
    fn listings_of_a_product_are_close() {
        let inv = small();
        let d_same = crate::model::l2_distance(&inv.items[0].embedding, &inv.items[1].embedding).unwrap();
        let d_other = crate::model::l2_distance(&inv.items[0].embedding, &inv.items[4].embedding).unwrap();
        assert!(d_same < d_other);
    }

    #[test]
    fn confusion_fixture_errors_are_disjoint() {
        let s = confusion_fixture(1, 400, 0.2, 0.15).unwrap();
        for x in &s {
            assert!(x.model.argmax() == x.label || x.search.argmax() == x.label);
        }
        assert!((fused_accuracy(&s, 1.0).unwrap() - 0.8).abs() < 1e-12);
        assert!((fused_accuracy(&s, 0.0).unwrap() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn click_logs_reference_inventory() {
        let inv = small();
        let (records, channels) = click_logs(&inv, &ClickLogConfig { records: 30, ..Default::default() }).unwrap();
        assert_eq!(channels.len(), 2);
        for r in &records {
            r.validate().unwrap();
            assert_eq!(r.query_features.len(), 2);
        }
    }
}
