//! Quality-aware re-ranking of the top results.
//!
//! A boosted ensemble of regression trees scores listings from their
//! commercial metadata. Trees are fitted to squared-loss residuals and the
//! raw ensemble output is mapped to `[0, 1]` by a logistic calibration
//! fitted on a held-out split. The final ranking blends the calibrated
//! quality score with similarity.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{QualityMeta, RankedEntry, RankedList};

pub const FORMAT_VERSION: u32 = 1;
pub const QUALITY_FEATURES: [&str; 3] = ["sales_volume", "percent_conversion", "applause_rate"];

/// Named feature values.
pub type Features = HashMap<String, f64>;

pub fn quality_features(q: &QualityMeta) -> Features {
    HashMap::from([
        ("sales_volume".to_string(), q.sales_volume as f64),
        ("percent_conversion".to_string(), f64::from(q.percent_conversion)),
        ("applause_rate".to_string(), f64::from(q.applause_rate)),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    /// Rows with `x[feature] > threshold` go right.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    node = if x[*feature] > *threshold { right } else { left };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn max_feature(&self) -> Option<usize> {
        match self {
            Node::Leaf { .. } => None,
            Node::Split { feature, left, right, .. } => {
                [Some(*feature), left.max_feature(), right.max_feature()].into_iter().flatten().max()
            }
        }
    }
}

/// `scaled = logistic(a * raw + b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    pub a: f64,
    pub b: f64,
}

impl Default for Logistic {
    fn default() -> Self {
        Self { a: 1.0, b: 0.0 }
    }
}

impl Logistic {
    pub fn apply(&self, raw: f64) -> f64 {
        crate::ranking::mask::sigmoid(self.a * raw + self.b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub raw: f64,
    pub scaled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub version: u32,
    pub features: Vec<String>,
    pub shrinkage: f64,
    pub trees: Vec<Node>,
    pub logistic: Logistic,
}

impl TreeEnsemble {
    pub fn empty(features: &[&str], shrinkage: f64, logistic: Logistic) -> Self {
        Self {
            version: FORMAT_VERSION,
            features: features.iter().map(|s| s.to_string()).collect(),
            shrinkage,
            trees: Vec::new(),
            logistic,
        }
    }

    /// Checks that every split references a declared feature and depth stays within `max_depth`.
    pub fn validate(&self, max_depth: usize) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported ensemble version {}", self.version)));
        }
        for t in &self.trees {
            if t.max_feature().is_some_and(|f| f >= self.features.len()) {
                return Err(Error::Format("split references an undeclared feature".into()));
            }
            if t.depth() > max_depth {
                return Err(Error::Format(format!("tree depth {} exceeds {max_depth}", t.depth())));
            }
        }
        Ok(())
    }

    /// Feature values in declaration order.
    pub fn vectorize(&self, features: &Features) -> Result<Vec<f64>> {
        self.features
            .iter()
            .map(|name| {
                features
                    .get(name)
                    .copied()
                    .ok_or_else(|| Error::MissingFeature(name.clone()))
            })
            .collect()
    }

    pub fn raw(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| self.shrinkage * t.eval(x)).sum()
    }

    pub fn score(&self, features: &Features) -> Result<QualityScore> {
        let raw = self.raw(&self.vectorize(features)?);
        Ok(QualityScore {
            raw,
            scaled: self.logistic.apply(raw),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: Self = serde_json::from_str(s)?;
        e.validate(usize::MAX)?;
        Ok(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_samples_leaf: usize,
    /// Fraction of rows held out for the logistic calibration.
    pub holdout: f64,
    /// Ridge penalty of the calibration fit.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            max_depth: 4,
            shrinkage: 0.1,
            min_samples_leaf: 5,
            holdout: 0.2,
            ridge: 1e-3,
            seed: 0,
        }
    }
}

/// A fitted ensemble plus the split it was fitted on.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub ensemble: TreeEnsemble,
    pub train_rows: Vec<usize>,
    pub holdout_rows: Vec<usize>,
}

struct Dataset<'a> {
    x: &'a [Vec<f64>],
    /// Per feature, row indices sorted by that feature's value.
    sorted: Vec<Vec<usize>>,
}

fn grow(
    data: &Dataset,
    rows: &[usize],
    residual: &[f64],
    depth: usize,
    cfg: &FitConfig,
) -> Node {
    let mean = rows.iter().map(|&r| residual[r]).sum::<f64>() / rows.len() as f64;
    if depth == cfg.max_depth || rows.len() < 2 * cfg.min_samples_leaf.max(1) {
        return Node::Leaf { value: mean };
    }
    let total: f64 = rows.iter().map(|&r| residual[r]).sum();
    let n = rows.len() as f64;
    let mut in_node = vec![false; data.x.len()];
    for &r in rows {
        in_node[r] = true;
    }
    // maximize the between-group sum of squares, equivalent to minimizing SSE
    let base = total * total / n;
    let mut best: Option<(f64, usize, f64)> = None;
    for (f, order) in data.sorted.iter().enumerate() {
        let ordered: Vec<usize> = order.iter().copied().filter(|&r| in_node[r]).collect();
        let mut left_sum = 0.0;
        for i in 0..ordered.len() - 1 {
            left_sum += residual[ordered[i]];
            let (a, b) = (data.x[ordered[i]][f], data.x[ordered[i + 1]][f]);
            let nl = i + 1;
            let nr = ordered.len() - nl;
            if a == b || nl < cfg.min_samples_leaf.max(1) || nr < cfg.min_samples_leaf.max(1) {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64 - base;
            if gain > best.map_or(1e-12, |b| b.0) {
                best = Some((gain, f, a + (b - a) / 2.0));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return Node::Leaf { value: mean };
    };
    let (right, left): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| data.x[r][feature] > threshold);
    Node::Split {
        feature,
        threshold,
        left: Box::new(grow(data, &left, residual, depth + 1, cfg)),
        right: Box::new(grow(data, &right, residual, depth + 1, cfg)),
    }
}

/// Ridge-regularized logistic regression of `labels` on `raw` by Newton's method.
pub fn fit_logistic(raw: &[f64], labels: &[bool], ridge: f64) -> Logistic {
    let (mut a, mut b) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (mut ga, mut gb) = (ridge * a, ridge * b);
        let (mut haa, mut hab, mut hbb) = (ridge, 0.0, ridge);
        for (&r, &y) in raw.iter().zip(labels) {
            let p = crate::ranking::mask::sigmoid(a * r + b);
            let e = p - if y { 1.0 } else { 0.0 };
            let w = p * (1.0 - p);
            ga += e * r;
            gb += e;
            haa += w * r * r;
            hab += w * r;
            hbb += w;
        }
        let det = haa * hbb - hab * hab;
        if !(det > 0.0) {
            break;
        }
        let da = (hbb * ga - hab * gb) / det;
        let db = (haa * gb - hab * ga) / det;
        a -= da;
        b -= db;
        if da.abs() < 1e-12 && db.abs() < 1e-12 {
            break;
        }
    }
    Logistic { a, b }
}

/// Boosts `rounds` trees on the training split, then calibrates on the held-out split.
pub fn fit(rows: &[(Features, bool)], feature_names: &[&str], cfg: &FitConfig) -> Result<FitReport> {
    if rows.iter().all(|r| r.1) || rows.iter().all(|r| !r.1) {
        return Err(Error::DegenerateLabels);
    }
    if !(0.0..1.0).contains(&cfg.holdout) || cfg.max_depth == 0 {
        return Err(Error::InvalidParam("holdout must lie in [0,1) and max_depth >= 1".into()));
    }
    let template = TreeEnsemble::empty(feature_names, cfg.shrinkage, Logistic::default());
    let x = rows
        .iter()
        .map(|(f, _)| template.vectorize(f))
        .collect::<Result<Vec<_>>>()?;
    let y: Vec<f64> = rows.iter().map(|r| if r.1 { 1.0 } else { 0.0 }).collect();

    // stratified split so both sides see both classes
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train_rows = Vec::new();
    let mut holdout_rows = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].1 == class).collect();
        idx.shuffle(&mut rng);
        let h = (idx.len() as f64 * cfg.holdout).round() as usize;
        let h = h.min(idx.len().saturating_sub(1));
        holdout_rows.extend_from_slice(&idx[..h]);
        train_rows.extend_from_slice(&idx[h..]);
    }
    train_rows.sort_unstable();
    holdout_rows.sort_unstable();

    let sorted = (0..feature_names.len())
        .map(|f| {
            let mut order = train_rows.clone();
            order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            order
        })
        .collect();
    let data = Dataset { x: &x, sorted };
    let mut ensemble = template;
    let mut prediction = vec![0.0; rows.len()];
    let mut residual = vec![0.0; rows.len()];
    for _ in 0..cfg.rounds {
        for &r in &train_rows {
            residual[r] = y[r] - prediction[r];
        }
        let tree = grow(&data, &train_rows, &residual, 0, cfg);
        for (p, xi) in prediction.iter_mut().zip(&x) {
            *p += cfg.shrinkage * tree.eval(xi);
        }
        ensemble.trees.push(tree);
    }

    let calib: &[usize] = if holdout_rows.iter().any(|&r| rows[r].1) && holdout_rows.iter().any(|&r| !rows[r].1) {
        &holdout_rows
    } else {
        &train_rows
    };
    let raw: Vec<f64> = calib.iter().map(|&r| prediction[r]).collect();
    let labels: Vec<bool> = calib.iter().map(|&r| rows[r].1).collect();
    ensemble.logistic = fit_logistic(&raw, &labels, cfg.ridge);
    Ok(FitReport {
        ensemble,
        train_rows,
        holdout_rows,
    })
}

/// Area under the ROC curve with ties counted as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // average ranks over ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    /// Weight of similarity against quality.
    pub beta: f64,
    pub top_n: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self { beta: 0.7, top_n: 60 }
    }
}

/// Re-orders the first `top_n` candidates by
/// `beta * (1 - normalized distance) + (1 - beta) * scaled quality`.
pub fn rerank_top<F>(
    candidates: &RankedList,
    quality: F,
    ensemble: &TreeEnsemble,
    cfg: &RerankConfig,
) -> Result<RankedList>
where
    F: Fn(u64) -> Option<QualityMeta>,
{
    if !(0.0..=1.0).contains(&cfg.beta) {
        return Err(Error::InvalidParam(format!("beta must lie in [0,1], got {}", cfg.beta)));
    }
    let top = &candidates.entries()[..candidates.len().min(cfg.top_n)];
    let (lo, hi) = top.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
        (lo.min(e.distance), hi.max(e.distance))
    });
    let span = hi - lo;
    let mut out = Vec::with_capacity(top.len());
    for e in top {
        let meta = quality(e.id).ok_or_else(|| Error::MissingFeature(format!("quality metadata for item {}", e.id)))?;
        let q = ensemble.score(&quality_features(&meta))?;
        let nd = if span > 0.0 { (e.distance - lo) / span } else { 0.0 };
        let score = cfg.beta * (1.0 - nd) + (1.0 - cfg.beta) * q.scaled;
        out.push(RankedEntry {
            id: e.id,
            distance: e.distance,
            score: Some(score),
        });
    }
    RankedList::from_scored(out)
}
