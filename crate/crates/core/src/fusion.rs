//! Category prediction by fusing a classifier's score vector with a
//! kernel-weighted vote over labelled reference neighbours.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{l2_distance, squared_l2, Category, Embedding, NUM_CATEGORIES};

/// Additive smoothing applied to the true-label probability before the log.
pub const LIKELIHOOD_SMOOTHING: f64 = 1e-9;

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// A labelled reference embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePair {
    pub x: Embedding,
    pub y: Category,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub lambda: f64,
    pub k_neighbors: usize,
}

impl Default for WeightParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            k_neighbors: 30,
        }
    }
}

impl WeightParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParam(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.k_neighbors == 0 {
            return Err(Error::InvalidParam("k_neighbors must be >= 1".into()));
        }
        Ok(())
    }
}

/// A probability vector over the categories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CategoryDistribution {
    probs: [f64; NUM_CATEGORIES],
}

impl CategoryDistribution {
    pub fn new(probs: [f64; NUM_CATEGORIES]) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidValue("probability outside [0,1]".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::InvalidValue(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative scores (e.g. raw classifier outputs) to sum to one.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.len() != NUM_CATEGORIES {
            return Err(Error::dim(NUM_CATEGORIES, scores.len()));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidValue("scores must be finite and non-negative".into()));
        }
        let sum: f64 = scores.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidValue("scores sum to zero".into()));
        }
        let mut probs = [0.0; NUM_CATEGORIES];
        for (p, s) in probs.iter_mut().zip(scores) {
            *p = s / sum;
        }
        Ok(Self { probs })
    }

    pub fn one_hot(c: Category) -> Self {
        let mut probs = [0.0; NUM_CATEGORIES];
        probs[c.index()] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64; NUM_CATEGORIES] {
        &self.probs
    }

    pub fn prob(&self, c: Category) -> f64 {
        self.probs[c.index()]
    }

    /// Most probable category; the lowest index wins ties.
    pub fn argmax(&self) -> Category {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate().skip(1) {
            if *p > self.probs[best] {
                best = i;
            }
        }
        Category::new(best).expect("index < NUM_CATEGORIES")
    }
}

impl TryFrom<Vec<f64>> for CategoryDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        let probs: [f64; NUM_CATEGORIES] = v
            .try_into()
            .map_err(|v: Vec<f64>| Error::dim(NUM_CATEGORIES, v.len()))?;
        Self::new(probs)
    }
}

impl From<CategoryDistribution> for Vec<f64> {
    fn from(d: CategoryDistribution) -> Vec<f64> {
        d.probs.to_vec()
    }
}

/// A retrieved reference neighbour: its label and L2 distance to the query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub label: Category,
    pub distance: f64,
}

/// Gaussian kernel weight `exp(-lambda * ||x - xi||^2)`.
pub fn knn_weight(x: &Embedding, xi: &Embedding, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParam(format!("lambda must be > 0, got {lambda}")));
    }
    let d = l2_distance(x, xi)?;
    Ok((-lambda * d * d).exp())
}

/// Kernel-weighted label vote over the given neighbours.
///
/// Weights are computed relative to the nearest neighbour, which leaves the
/// normalized vote unchanged and keeps it finite for very large `lambda`.
pub fn search_based_scores(
    neighbors: &[Neighbor],
    params: &WeightParams,
) -> Result<CategoryDistribution> {
    params.validate()?;
    if neighbors.is_empty() {
        return Err(Error::EmptyInput("neighbor list is empty".into()));
    }
    if neighbors.len() > params.k_neighbors {
        return Err(Error::InvalidParam(format!(
            "{} neighbors exceed k_neighbors = {}",
            neighbors.len(),
            params.k_neighbors
        )));
    }
    Ok(CategoryDistribution {
        probs: vote(neighbors, params.lambda),
    })
}

fn vote(neighbors: &[Neighbor], lambda: f64) -> [f64; NUM_CATEGORIES] {
    let min_sq = neighbors
        .iter()
        .map(|n| n.distance * n.distance)
        .fold(f64::INFINITY, f64::min);
    let mut mass = [0.0; NUM_CATEGORIES];
    let mut total = 0.0;
    for n in neighbors {
        let w = (-lambda * (n.distance * n.distance - min_sq)).exp();
        mass[n.label.index()] += w;
        total += w;
    }
    for m in &mut mass {
        *m /= total;
    }
    mass
}

/// Brute-force `k` nearest references by L2 distance, ties by reference order.
pub fn nearest_neighbors(
    x: &Embedding,
    reference: &[ReferencePair],
    k: usize,
) -> Result<Vec<Neighbor>> {
    let mut scored = Vec::with_capacity(reference.len());
    for (i, r) in reference.iter().enumerate() {
        if r.x.dim() != x.dim() {
            return Err(Error::dim(x.dim(), r.x.dim()));
        }
        scored.push((squared_l2(x.values(), r.x.values()), i));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(d2, i)| Neighbor {
            label: reference[i].y,
            distance: d2.sqrt(),
        })
        .collect())
}

/// A validation point's retrieved neighbourhood and true label.
#[derive(Clone, Debug)]
pub struct Neighborhood {
    pub neighbors: Vec<Neighbor>,
    pub label: Category,
}

/// Smoothed log-likelihood of the true labels under the kernel vote.
pub fn log_likelihood(neighborhoods: &[Neighborhood], lambda: f64) -> f64 {
    neighborhoods
        .iter()
        .map(|n| (vote(&n.neighbors, lambda)[n.label.index()] + LIKELIHOOD_SMOOTHING).ln())
        .sum()
}

/// Search range and resolution for the bandwidth fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSearch {
    pub lower: f64,
    pub upper: f64,
    pub coarse_points: usize,
    pub tolerance: f64,
}

impl Default for LambdaSearch {
    fn default() -> Self {
        Self {
            lower: 1e-3,
            upper: 1e3,
            coarse_points: 20,
            tolerance: 1e-6,
        }
    }
}

/// Log-spaced grid of `n` points covering `[lower, upper]`.
pub fn log_grid(lower: f64, upper: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && lower > 0.0 && upper > lower);
    let (a, b) = (lower.ln(), upper.ln());
    (0..n)
        .map(|i| {
            if i == 0 {
                lower
            } else if i == n - 1 {
                upper
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// Maximum-likelihood kernel bandwidth for the search-based vote.
///
/// Each validation point's `k` nearest references are retrieved once; the
/// likelihood is then maximized over `log lambda`.
pub fn estimate_lambda(
    validation: &[(Embedding, Category)],
    reference: &[ReferencePair],
    k: usize,
) -> Result<f64> {
    if validation.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput("validation and reference sets must be non-empty".into()));
    }
    if k == 0 {
        return Err(Error::InvalidParam("k must be >= 1".into()));
    }
    let neighborhoods = validation
        .iter()
        .map(|(x, y)| {
            Ok(Neighborhood {
                neighbors: nearest_neighbors(x, reference, k)?,
                label: *y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    estimate_lambda_from_neighborhoods(&neighborhoods, &LambdaSearch::default())
}

/// Bandwidth fit over precomputed neighbourhoods: a coarse log-grid picks the
/// bracket, golden-section search refines inside it.
///
/// A likelihood that is flat over the whole grid resolves to the lower bound.
/// Otherwise ties between grid points go to the larger `lambda`, so a
/// likelihood that rises and then saturates numerically resolves to the upper
/// bound.
pub fn estimate_lambda_from_neighborhoods(
    neighborhoods: &[Neighborhood],
    search: &LambdaSearch,
) -> Result<f64> {
    if neighborhoods.is_empty() {
        return Err(Error::EmptyInput("no validation neighborhoods".into()));
    }
    let degenerate: Vec<usize> = neighborhoods
        .iter()
        .enumerate()
        .filter(|(_, n)| !n.neighbors.iter().any(|nb| nb.label == n.label))
        .map(|(i, _)| i)
        .collect();
    if !degenerate.is_empty() {
        return Err(Error::DegenerateLikelihood { points: degenerate });
    }

    let grid = log_grid(search.lower, search.upper, search.coarse_points);
    let values: Vec<f64> = grid.iter().map(|&l| log_likelihood(neighborhoods, l)).collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let best = if values.iter().all(|&v| v == max) {
        0
    } else {
        values.iter().rposition(|&v| v == max).expect("max is attained")
    };

    let lo = grid[best.saturating_sub(1)].ln();
    let hi = grid[(best + 1).min(grid.len() - 1)].ln();
    let objective = |t: f64| log_likelihood(neighborhoods, t.exp());
    let (t_star, f_star) = golden_section_max(objective, lo, hi, search.tolerance);

    if f_star > values[best] {
        Ok(t_star.exp().clamp(search.lower, search.upper))
    } else {
        Ok(grid[best])
    }
}

fn golden_section_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let t = (a + b) / 2.0;
    (t, f(t))
}

/// `alpha * model + (1 - alpha) * search`.
pub fn fuse(
    model: &CategoryDistribution,
    search: &CategoryDistribution,
    alpha: f64,
) -> Result<CategoryDistribution> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParam(format!("alpha must lie in [0,1], got {alpha}")));
    }
    let mut probs = [0.0; NUM_CATEGORIES];
    for (i, p) in probs.iter_mut().enumerate() {
        *p = alpha * model.probs[i] + (1.0 - alpha) * search.probs[i];
    }
    Ok(CategoryDistribution { probs })
}

/// One labelled example for tuning the fusion weight.
#[derive(Clone, Debug)]
pub struct FusionSample {
    pub model: CategoryDistribution,
    pub search: CategoryDistribution,
    pub label: Category,
}

/// Fraction of samples whose fused argmax equals the label.
pub fn fused_accuracy(samples: &[FusionSample], alpha: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no fusion samples".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        if fuse(&s.model, &s.search, alpha)?.argmax() == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// The grid `0, 0.05, ..., 1` searched by [`tune_alpha`].
pub fn alpha_grid() -> impl Iterator<Item = f64> {
    (0..=20).map(|i| f64::from(i) / 20.0)
}

/// Grid-searched fusion weight maximizing Accuracy@1; the smallest maximizer wins.
pub fn tune_alpha(samples: &[FusionSample]) -> Result<f64> {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for alpha in alpha_grid() {
        let acc = fused_accuracy(samples, alpha)?;
        if acc > best.0 {
            best = (acc, alpha);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat(i: usize) -> Category {
        Category::new(i).unwrap()
    }

    fn nb(label: usize, distance: f64) -> Neighbor {
        Neighbor {
            label: cat(label),
            distance,
        }
    }

    fn dist_with(head: &[f64]) -> CategoryDistribution {
        let mut p = [0.0; NUM_CATEGORIES];
        p[..head.len()].copy_from_slice(head);
        CategoryDistribution::new(p).unwrap()
    }

    #[test]
    fn weight_formula() {
        let x = Embedding::new(vec![0.0, 0.0]).unwrap();
        let unit = Embedding::new(vec![1.0, 0.0]).unwrap();
        let half = Embedding::new(vec![0.5, 0.0]).unwrap();
        assert_eq!(knn_weight(&x, &x, 1.0).unwrap(), 1.0);
        assert!((knn_weight(&x, &unit, 1.0).unwrap() - 0.367879441171).abs() < 1e-9);
        assert!((knn_weight(&x, &half, 2.0).unwrap() - 0.606530659713).abs() < 1e-9);
        assert!(matches!(knn_weight(&x, &x, 0.0), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn unanimous_and_symmetric_votes() {
        let params = WeightParams::default();
        let all_c: Vec<Neighbor> = (0..30).map(|i| nb(4, 0.1 + i as f64 * 0.01)).collect();
        assert_eq!(search_based_scores(&all_c, &params).unwrap().prob(cat(4)), 1.0);

        let pair = [nb(1, 0.3), nb(2, 0.3)];
        let d = search_based_scores(&pair, &params).unwrap();
        assert_eq!(d.prob(cat(1)), 0.5);
        assert_eq!(d.prob(cat(2)), 0.5);
    }

    #[test]
    fn five_neighbor_vote_matches_hand_sum() {
        let dists = [0.1, 0.2, 0.3, 0.4, 0.5];
        let labels = [0, 0, 1, 1, 1];
        let neighbors: Vec<Neighbor> = dists.iter().zip(labels).map(|(&d, l)| nb(l, d)).collect();
        let got = search_based_scores(&neighbors, &WeightParams { lambda: 1.0, k_neighbors: 30 }).unwrap();
        let w: Vec<f64> = dists.iter().map(|d: &f64| (-d * d).exp()).collect();
        let total: f64 = w.iter().sum();
        assert!((got.prob(cat(0)) - (w[0] + w[1]) / total).abs() < 1e-12);
        assert!((got.prob(cat(1)) - (w[2] + w[3] + w[4]) / total).abs() < 1e-12);
    }

    #[test]
    fn vote_invariant_to_weight_rescaling() {
        // shifting every squared distance by a constant rescales all weights uniformly
        let base = [nb(0, 0.2), nb(3, 0.5), nb(3, 0.7)];
        let shifted: Vec<Neighbor> = base
            .iter()
            .map(|n| nb(n.label.index(), (n.distance * n.distance + 0.8).sqrt()))
            .collect();
        let p = WeightParams { lambda: 3.0, k_neighbors: 30 };
        let a = search_based_scores(&base, &p).unwrap();
        let b = search_based_scores(&shifted, &p).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_oversized_neighbor_lists() {
        let p = WeightParams { lambda: 1.0, k_neighbors: 2 };
        assert!(matches!(search_based_scores(&[], &p), Err(Error::EmptyInput(_))));
        assert!(search_based_scores(&[nb(0, 0.1), nb(0, 0.2), nb(1, 0.3)], &p).is_err());
    }

    #[test]
    fn flat_likelihood_returns_lower_bound() {
        let hoods: Vec<Neighborhood> = (0..5)
            .map(|i| Neighborhood {
                neighbors: (0..30).map(|j| nb(i, 0.1 * j as f64)).collect(),
                label: cat(i),
            })
            .collect();
        let l = estimate_lambda_from_neighborhoods(&hoods, &LambdaSearch::default()).unwrap();
        assert_eq!(l, 1e-3);
    }

    #[test]
    fn increasing_likelihood_returns_upper_bound() {
        let hoods = vec![Neighborhood {
            neighbors: vec![nb(0, 0.1), nb(1, 0.9)],
            label: cat(0),
        }];
        // oracle: the likelihood increases along a fine grid
        let grid = log_grid(1e-3, 1e3, 400);
        let ll: Vec<f64> = grid.iter().map(|&l| log_likelihood(&hoods, l)).collect();
        assert!(ll.windows(2).all(|w| w[1] >= w[0]));
        let l = estimate_lambda_from_neighborhoods(&hoods, &LambdaSearch::default()).unwrap();
        assert_eq!(l, 1e3);
    }

    #[test]
    fn unreachable_label_is_reported() {
        let hoods = vec![
            Neighborhood { neighbors: vec![nb(0, 0.1)], label: cat(0) },
            Neighborhood { neighbors: vec![nb(1, 0.1), nb(2, 0.2)], label: cat(3) },
        ];
        match estimate_lambda_from_neighborhoods(&hoods, &LambdaSearch::default()) {
            Err(Error::DegenerateLikelihood { points }) => assert_eq!(points, vec![1]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fuse_degenerate_weights_and_flip() {
        let model = dist_with(&[0.6, 0.4]);
        let search = dist_with(&[0.2, 0.8]);
        assert_eq!(fuse(&model, &search, 1.0).unwrap(), model);
        assert_eq!(fuse(&model, &search, 0.0).unwrap(), search);
        let mid = fuse(&model, &search, 0.5).unwrap();
        assert!((mid.probs()[0] - 0.4).abs() < 1e-12);
        assert!((mid.probs()[1] - 0.6).abs() < 1e-12);
        assert_eq!(model.argmax(), cat(0));
        assert_eq!(mid.argmax(), cat(1));
        assert!(fuse(&model, &search, 1.5).is_err());
    }

    #[test]
    fn tune_alpha_edges() {
        let right = dist_with(&[0.9, 0.1]);
        let wrong = dist_with(&[0.1, 0.9]);
        let model_right: Vec<FusionSample> = (0..4)
            .map(|_| FusionSample { model: right.clone(), search: right.clone(), label: cat(0) })
            .collect();
        // every alpha is a maximizer; the smallest wins
        assert_eq!(tune_alpha(&model_right).unwrap(), 0.0);

        let search_right: Vec<FusionSample> = (0..4)
            .map(|_| FusionSample { model: wrong.clone(), search: right.clone(), label: cat(0) })
            .collect();
        assert_eq!(tune_alpha(&search_right).unwrap(), 0.0);

        let model_only: Vec<FusionSample> = (0..4)
            .map(|_| FusionSample { model: right.clone(), search: wrong.clone(), label: cat(0) })
            .collect();
        assert_eq!(tune_alpha(&model_only).unwrap(), 0.5);
    }

    #[test]
    fn tuned_alpha_beats_endpoints_on_complementary_errors() {
        let mut samples = Vec::new();
        // model confidently right, search weakly wrong
        for _ in 0..3 {
            samples.push(FusionSample {
                model: dist_with(&[0.9, 0.1]),
                search: dist_with(&[0.45, 0.55]),
                label: cat(0),
            });
        }
        // search confidently right, model weakly wrong
        for _ in 0..3 {
            samples.push(FusionSample {
                model: dist_with(&[0.55, 0.45]),
                search: dist_with(&[0.1, 0.9]),
                label: cat(1),
            });
        }
        let alpha = tune_alpha(&samples).unwrap();
        let tuned = fused_accuracy(&samples, alpha).unwrap();
        // exhaustive oracle over the grid
        let grid_best = alpha_grid()
            .map(|a| fused_accuracy(&samples, a).unwrap())
            .fold(0.0, f64::max);
        assert_eq!(tuned, grid_best);
        assert!(tuned >= fused_accuracy(&samples, 0.0).unwrap());
        assert!(tuned >= fused_accuracy(&samples, 1.0).unwrap());
        assert_eq!(tuned, 1.0);
    }

    #[test]
    fn distribution_serde_roundtrip() {
        let d = dist_with(&[0.25, 0.75]);
        let json = serde_json::to_string(&d).unwrap();
        let back: CategoryDistribution = serde_json::from_str(&json).unwrap();
        assert_eq!(d, back);
        assert!(serde_json::from_str::<CategoryDistribution>("[0.5, 0.5]").is_err());
    }
}
