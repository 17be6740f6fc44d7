//! Joint training of the embedder and per-image detection masks.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::TripletImageSet;
use super::embedder::{backward, embed_masked, Forward, ToyEmbedder, ToyImage};
use super::loss::{batch_loss, euclid, DEFAULT_MARGIN};
use super::mask::{iou, MaskParams, Rect, DEFAULT_SHARPNESS};
use crate::error::{Error, Result};

/// Smallest box side kept after a gradient step.
const MIN_EXTENT: f64 = 0.05;
/// Box edges are clamped to this range after a gradient step.
const EDGE_RANGE: (f64, f64) = (-0.5, 1.5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Step size for the embedder weights.
    pub learning_rate: f64,
    /// Step size for the mask coordinates.
    pub mask_learning_rate: f64,
    pub margin: f64,
    pub sharpness: f64,
    /// Queries per mini-batch; negatives are shared across the batch.
    pub batch_size: usize,
    pub embed_dim: usize,
    /// Side fraction of the initial centred box.
    pub init_box: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            mask_learning_rate: 0.5,
            margin: DEFAULT_MARGIN,
            sharpness: DEFAULT_SHARPNESS,
            batch_size: 200,
            embed_dim: 32,
            init_box: 0.6,
            seed: 0,
        }
    }
}

/// Learned parameters and training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub embedder: ToyEmbedder,
    pub masks: Vec<MaskParams>,
    pub step: u64,
    pub loss_history: Vec<f64>,
    /// Forward passes that fell back to uniform pooling.
    pub fallback_count: u64,
}

impl TrainState {
    pub fn init(images: &[ToyImage], cfg: &TrainConfig) -> Result<Self> {
        let channels = images.first().map_or(3, |im| im.channels);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mask = MaskParams::new(Rect::centered(cfg.init_box), cfg.sharpness)?;
        Ok(Self {
            embedder: ToyEmbedder::random(channels, cfg.embed_dim, &mut rng),
            masks: vec![mask; images.len()],
            step: 0,
            loss_history: Vec::new(),
            fallback_count: 0,
        })
    }
}

/// One query of a mini-batch: its anchor and positive image plus every
/// negative it is ranked against.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGroup {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Pairs each sampled triplet's `(q, q+)` with every sampled negative,
/// skipping negatives that show the query's own product.
pub fn share_negatives(set: &TripletImageSet, sampled: &[[usize; 3]]) -> Vec<QueryGroup> {
    sampled
        .iter()
        .map(|&[q, p, _]| QueryGroup {
            anchor: q,
            positive: p,
            negatives: sampled
                .iter()
                .map(|t| t[2])
                .filter(|&n| set.product_of[n] != set.product_of[q])
                .collect(),
        })
        .filter(|g| !g.negatives.is_empty())
        .collect()
}

/// Gradient of the batch loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// `d loss / d(x_l, x_r, y_t, y_b)` for every image touched by the batch.
    pub masks: HashMap<usize, [f64; 4]>,
    /// Forward passes in this batch that fell back to uniform pooling.
    pub fallbacks: u64,
}

impl Gradients {
    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|g| *g == 0.0)
            && self.masks.values().all(|m| m.iter().all(|g| *g == 0.0))
    }
}

fn forward_all(
    images: &[ToyImage],
    state: &TrainState,
    groups: &[QueryGroup],
) -> Result<HashMap<usize, Forward>> {
    let mut cache = HashMap::new();
    for g in groups {
        for &i in std::iter::once(&g.anchor)
            .chain(std::iter::once(&g.positive))
            .chain(&g.negatives)
        {
            if let std::collections::hash_map::Entry::Vacant(slot) = cache.entry(i) {
                slot.insert(embed_masked(&images[i], &state.masks[i], &state.embedder)?);
            }
        }
    }
    Ok(cache)
}

/// Batch loss without gradients.
pub fn loss(images: &[ToyImage], state: &TrainState, groups: &[QueryGroup], margin: f64) -> Result<f64> {
    let cache = forward_all(images, state, groups)?;
    Ok(batch_loss(&hinge_terms(&cache, groups, margin)))
}

fn hinge_terms(cache: &HashMap<usize, Forward>, groups: &[QueryGroup], margin: f64) -> Vec<Vec<f64>> {
    groups
        .iter()
        .map(|g| {
            let fq = &cache[&g.anchor].embedding;
            let d_pos = euclid(fq, &cache[&g.positive].embedding);
            g.negatives
                .iter()
                .map(|n| d_pos - euclid(fq, &cache[n].embedding) + margin)
                .collect()
        })
        .collect()
}

/// Analytic gradients of the query-level loss with respect to the embedder
/// and each involved image's mask edges. The sharpness `k` is held fixed.
pub fn gradients(
    images: &[ToyImage],
    state: &TrainState,
    groups: &[QueryGroup],
    margin: f64,
) -> Result<Gradients> {
    let cache = forward_all(images, state, groups)?;
    let terms = hinge_terms(&cache, groups, margin);
    let loss = batch_loss(&terms);
    let dim = state.embedder.out_dim;

    let active = terms.iter().filter(|t| t.iter().any(|&v| v > 0.0)).count();
    let mut grad_f: HashMap<usize, Vec<f64>> = HashMap::new();
    if active > 0 {
        for (g, t) in groups.iter().zip(&terms) {
            let violating = t.iter().filter(|&&v| v > 0.0).count();
            if violating == 0 {
                continue;
            }
            let coef = 1.0 / (active as f64 * violating as f64);
            let fq = &cache[&g.anchor].embedding;
            let fp = &cache[&g.positive].embedding;
            let d_pos = euclid(fq, fp);
            for (&n, &v) in g.negatives.iter().zip(t) {
                if v <= 0.0 {
                    continue;
                }
                let fn_ = &cache[&n].embedding;
                let d_neg = euclid(fq, fn_);
                // d|a-b|/da = (a-b)/|a-b|; the subgradient at zero distance is zero
                let unit_pos: Vec<f64> = unit_diff(fq, fp, d_pos);
                let unit_neg: Vec<f64> = unit_diff(fq, fn_, d_neg);
                accumulate(&mut grad_f, g.anchor, dim, |k| coef * (unit_pos[k] - unit_neg[k]));
                accumulate(&mut grad_f, g.positive, dim, |k| -coef * unit_pos[k]);
                accumulate(&mut grad_f, n, dim, |k| coef * unit_neg[k]);
            }
        }
    }

    let emb = &state.embedder;
    let mut out = Gradients {
        loss,
        fallbacks: cache.values().filter(|f| f.fallback).count() as u64,
        weights: vec![0.0; emb.weights.len()],
        bias: vec![0.0; emb.bias.len()],
        masks: cache.keys().map(|&i| (i, [0.0; 4])).collect(),
    };
    let mut touched: Vec<usize> = grad_f.keys().copied().collect();
    touched.sort_unstable();
    for i in touched {
        let g = backward(&images[i], &state.masks[i], emb, &cache[&i], &grad_f[&i]);
        for (a, b) in out.weights.iter_mut().zip(&g.weights) {
            *a += b;
        }
        for (a, b) in out.bias.iter_mut().zip(&g.bias) {
            *a += b;
        }
        out.masks.insert(i, g.mask);
    }
    Ok(out)
}

fn unit_diff(a: &[f64], b: &[f64], dist: f64) -> Vec<f64> {
    if dist == 0.0 {
        vec![0.0; a.len()]
    } else {
        a.iter().zip(b).map(|(x, y)| (x - y) / dist).collect()
    }
}

fn accumulate(map: &mut HashMap<usize, Vec<f64>>, key: usize, dim: usize, f: impl Fn(usize) -> f64) {
    let slot = map.entry(key).or_insert_with(|| vec![0.0; dim]);
    for (k, v) in slot.iter_mut().enumerate() {
        *v += f(k);
    }
}

fn project(rect: &mut Rect) {
    let (lo, hi) = EDGE_RANGE;
    for v in [&mut rect.x_l, &mut rect.x_r, &mut rect.y_t, &mut rect.y_b] {
        *v = v.clamp(lo, hi);
    }
    for (a, b) in [(&mut rect.x_l, &mut rect.x_r), (&mut rect.y_t, &mut rect.y_b)] {
        if *b - *a < MIN_EXTENT {
            let mid = (*a + *b) / 2.0;
            *a = mid - MIN_EXTENT / 2.0;
            *b = mid + MIN_EXTENT / 2.0;
        }
    }
}

/// Applies one plain gradient-descent step.
pub fn apply(state: &mut TrainState, grads: &Gradients, cfg: &TrainConfig) {
    for (w, g) in state.embedder.weights.iter_mut().zip(&grads.weights) {
        *w -= cfg.learning_rate * g;
    }
    for (b, g) in state.embedder.bias.iter_mut().zip(&grads.bias) {
        *b -= cfg.learning_rate * g;
    }
    for (&i, g) in &grads.masks {
        let r = &mut state.masks[i].rect;
        r.x_l -= cfg.mask_learning_rate * g[0];
        r.x_r -= cfg.mask_learning_rate * g[1];
        r.y_t -= cfg.mask_learning_rate * g[2];
        r.y_b -= cfg.mask_learning_rate * g[3];
        project(r);
    }
}

/// Runs `cfg.steps` gradient-descent steps from a fresh state.
pub fn train(set: &TripletImageSet, cfg: &TrainConfig) -> Result<TrainState> {
    let state = TrainState::init(&set.images, cfg)?;
    train_from(set, cfg, state)
}

/// Continues training an existing state.
pub fn train_from(set: &TripletImageSet, cfg: &TrainConfig, mut state: TrainState) -> Result<TrainState> {
    if set.images.len() != state.masks.len() {
        return Err(Error::dim(state.masks.len(), set.images.len()));
    }
    if cfg.batch_size == 0 || set.triplets.is_empty() {
        return Err(Error::InvalidParam("need a non-empty batch and triplet set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..set.triplets.len()).collect();
    let mut cursor = order.len();
    for _ in 0..cfg.steps {
        let batch_len = cfg.batch_size.min(order.len());
        if cursor + batch_len > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let sampled: Vec<[usize; 3]> = order[cursor..cursor + batch_len]
            .iter()
            .map(|&t| set.triplets[t])
            .collect();
        cursor += batch_len;

        let groups = share_negatives(set, &sampled);
        let grads = gradients(&set.images, &state, &groups, cfg.margin)?;
        if !grads.loss.is_finite() || grads.weights.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step: state.step as usize });
        }
        state.fallback_count += grads.fallbacks;
        state.loss_history.push(grads.loss);
        apply(&mut state, &grads, cfg);
        state.step += 1;
    }
    Ok(state)
}

/// Localization quality of the learned boxes against planted boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxReport {
    pub images: usize,
    pub mean_iou: f64,
    pub iou_at_05: f64,
    pub iou_at_07: f64,
}

pub fn evaluate_boxes(images: &[ToyImage], masks: &[MaskParams]) -> BoxReport {
    let ious: Vec<f64> = images
        .iter()
        .zip(masks)
        .filter_map(|(im, m)| im.truth.as_ref().map(|t| iou(&m.rect, t)))
        .collect();
    let n = ious.len().max(1) as f64;
    BoxReport {
        images: ious.len(),
        mean_iou: ious.iter().sum::<f64>() / n,
        iou_at_05: ious.iter().filter(|&&v| v >= 0.5).count() as f64 / n,
        iou_at_07: ious.iter().filter(|&&v| v >= 0.7).count() as f64 / n,
    }
}

/// Means of `blocks` consecutive equal slices of the loss history.
pub fn smoothed_history(history: &[f64], blocks: usize) -> Vec<f64> {
    let size = (history.len() / blocks.max(1)).max(1);
    history
        .chunks(size)
        .filter(|c| c.len() == size)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
