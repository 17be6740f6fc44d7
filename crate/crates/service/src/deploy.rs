//! A deployment is everything the online flow needs: sharded index
//! snapshots behind replicas, the category-prediction parameters fitted at
//! build time, and an optional quality ensemble. It is immutable once
//! loaded, so one instance serves any number of concurrent queries.
//!
//! A query runs three stages:
//! 1. category prediction, fusing a classifier distribution with a
//!    kernel-weighted vote over the engine's nearest inventory items
//!    (skipped when the request forces a category);
//! 2. two-stage retrieval restricted to the predicted category;
//! 3. quality re-ranking of the top results (unless skipped or no ensemble
//!    is deployed).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vsearch::cluster::{build_shards, Cluster, ClusterTopology, Gathered, ReplicatedCluster, ShardBackend, ShardQuery};
use vsearch::fusion::{
    estimate_lambda_from_neighborhoods, fuse, fused_accuracy, search_based_scores, tune_alpha,
    CategoryDistribution, FusionSample, LambdaSearch, Neighbor, Neighborhood, WeightParams,
};
use vsearch::index::{build, BuildConfig, CategoryMask, CoarseHit, IndexSnapshot, QueryBudget};
use vsearch::model::{median_thresholds, squared_l2, Category, Embedding, Item, QualityMeta, RankedList, NUM_CATEGORIES};
use vsearch::rerank::{quality_features, rerank_top, RerankConfig, TreeEnsemble};

use crate::config::{BuildSettings, ServeSettings};
use crate::error::{ServiceError, ServiceResult};
use crate::wire::RemoteShard;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Fitted category-fusion parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub lambda: f64,
    pub alpha: f64,
    pub k_neighbors: usize,
}

/// Nearest-centroid classifier: a softmax over `-temperature * d^2` to the
/// mean embedding of each category. Stands in for the classifier when a
/// request carries no score vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidClassifier {
    pub centroids: Vec<Option<Vec<f32>>>,
    pub temperature: f64,
}

impl CentroidClassifier {
    pub fn fit(items: &[Item], temperature: f64) -> Self {
        let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; NUM_CATEGORIES];
        for it in items {
            let slot = sums[it.category.index()].get_or_insert_with(|| (vec![0.0; it.embedding.dim()], 0));
            for (s, &v) in slot.0.iter_mut().zip(it.embedding.values()) {
                *s += f64::from(v);
            }
            slot.1 += 1;
        }
        let centroids = sums
            .into_iter()
            .map(|s| s.map(|(sum, n)| sum.iter().map(|v| (v / n as f64) as f32).collect()))
            .collect();
        Self { centroids, temperature }
    }

    pub fn predict(&self, x: &Embedding) -> ServiceResult<CategoryDistribution> {
        let logits: Vec<Option<f64>> = self
            .centroids
            .iter()
            .map(|c| c.as_ref().map(|c| -self.temperature * squared_l2(x.values(), c)))
            .collect();
        let top = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Ok(CategoryDistribution::from_scores(&[1.0; NUM_CATEGORIES])?);
        }
        let scores: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |l| (l - top).exp())).collect();
        Ok(CategoryDistribution::from_scores(&scores)?)
    }
}

/// How well each predictor did on the held-out items at build time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub validation_items: usize,
    /// Validation items whose true category was absent from their neighbours;
    /// they carry no information about the bandwidth.
    pub uninformative: usize,
    pub model_accuracy: f64,
    pub search_accuracy: f64,
    pub fused_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dim: usize,
    pub items: usize,
    pub topology: ClusterTopology,
    pub band_width: usize,
    pub shard_files: Vec<String>,
    pub budget: QueryBudget,
    pub fusion: FusionParams,
    pub rerank: RerankConfig,
    pub classifier: CentroidClassifier,
    pub calibration: CalibrationReport,
    pub deadline_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_file: Option<String>,
}

/// Query-service request.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryRequest {
    pub embedding: Vec<f32>,
    /// Per-channel query vectors, accepted for click logging; retrieval
    /// uses `embedding`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<Vec<f32>>,
    /// Classifier scores for the query, one per category.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_scores: Option<Vec<f64>>,
    /// Skips prediction and restricts retrieval to this category.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_final: Option<usize>,
    pub skip_rerank: bool,
    pub return_timings: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub id: u64,
    pub distance: f64,
    /// Calibrated quality in `[0, 1]`, when an ensemble is deployed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
    /// Blended re-rank score, when the entry was re-ranked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Wall-clock time per stage, in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub predict_us: u64,
    pub retrieve_us: u64,
    pub rerank_us: u64,
    pub total_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub category: Category,
    pub forced: bool,
    pub distribution: CategoryDistribution,
    pub results: Vec<ResultEntry>,
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

/// A response together with the retrieval list before re-ranking.
#[derive(Clone, Debug)]
pub struct Execution {
    pub response: QueryResponse,
    pub retrieval: RankedList,
}

pub struct Deployment {
    manifest: Manifest,
    cluster: ReplicatedCluster,
    ensemble: Option<TreeEnsemble>,
}

fn micros(d: Duration) -> u64 {
    u64::try_from(d.as_micros()).unwrap_or(u64::MAX)
}

fn neighbors_from(results: &RankedList, label_of: impl Fn(u64) -> Option<Category>) -> Vec<Neighbor> {
    results
        .entries()
        .iter()
        .filter_map(|e| label_of(e.id).map(|label| Neighbor { label, distance: e.distance }))
        .collect()
}

/// Budget for retrieving `k` voting neighbours under the deployment budget.
fn neighbor_budget(budget: &QueryBudget, k: usize) -> QueryBudget {
    let k_coarse = budget.k_coarse.max(k);
    QueryBudget {
        candidate_budget: budget.candidate_budget.max(k_coarse),
        k_coarse,
        k_final: k,
    }
}

/// Fits the kernel bandwidth and fusion weight on held-out inventory items.
///
/// A seeded sample of items is held out; the rest are indexed as the
/// reference set. Each held-out item's neighbours come from that index under
/// the deployment budget, exactly as at query time. The classifier
/// distribution of a held-out item is its supplied score vector, or else a
/// centroid classifier fitted on the reference items.
pub fn calibrate(
    items: &[Item],
    model_scores: &BTreeMap<u64, Vec<f32>>,
    settings: &BuildSettings,
) -> ServiceResult<(FusionParams, CalibrationReport)> {
    let k = settings.k_neighbors;
    let mut params = FusionParams { lambda: 1.0, alpha: 0.5, k_neighbors: k };
    let held_out = settings.validation_items.min(items.len() / 5);
    if held_out == 0 || k == 0 {
        return Ok((params, CalibrationReport::default()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(settings.seed));
    let validation: Vec<&Item> = order[..held_out].iter().map(|&i| &items[i]).collect();
    let reference: Vec<Item> = order[held_out..].iter().map(|&i| items[i].clone()).collect();
    let index = build(&reference, &BuildConfig { band_width: settings.band_width, ..Default::default() })?;
    let classifier = CentroidClassifier::fit(&reference, settings.centroid_temperature);
    let budget = neighbor_budget(&settings.budget, k);

    let mut neighborhoods = Vec::with_capacity(held_out);
    for it in &validation {
        let results = index.search(&it.embedding, &budget, CategoryMask::ALL)?;
        neighborhoods.push(Neighborhood {
            neighbors: neighbors_from(&results, |id| index.category_of(id)),
            label: it.category,
        });
    }
    let informative: Vec<Neighborhood> = neighborhoods
        .iter()
        .filter(|n| n.neighbors.iter().any(|nb| nb.label == n.label))
        .cloned()
        .collect();
    if !informative.is_empty() {
        params.lambda = estimate_lambda_from_neighborhoods(&informative, &LambdaSearch::default())?;
    }
    let weights = WeightParams { lambda: params.lambda, k_neighbors: k };
    let mut samples = Vec::with_capacity(held_out);
    for (it, n) in validation.iter().zip(&neighborhoods) {
        let model = match model_scores.get(&it.id) {
            Some(s) => CategoryDistribution::from_scores(&s.iter().map(|&v| f64::from(v)).collect::<Vec<_>>())?,
            None => classifier.predict(&it.embedding)?,
        };
        let search = search_based_scores(&n.neighbors, &weights)?;
        samples.push(FusionSample { model, search, label: it.category });
    }
    params.alpha = tune_alpha(&samples)?;
    let report = CalibrationReport {
        validation_items: held_out,
        uninformative: held_out - informative.len(),
        model_accuracy: fused_accuracy(&samples, 1.0)?,
        search_accuracy: fused_accuracy(&samples, 0.0)?,
        fused_accuracy: fused_accuracy(&samples, params.alpha)?,
    };
    Ok((params, report))
}

impl Deployment {
    /// Builds shards with inventory-wide thresholds, fits category fusion
    /// and assembles in-process replicas.
    pub fn build(
        items: &[Item],
        model_scores: &BTreeMap<u64, Vec<f32>>,
        settings: &BuildSettings,
        ensemble: Option<TreeEnsemble>,
    ) -> ServiceResult<(Self, Vec<IndexSnapshot>)> {
        let first = items
            .first()
            .ok_or_else(|| vsearch::Error::EmptyInput("cannot deploy an empty inventory".into()))?;
        let dim = first.embedding.dim();
        settings.budget.validate()?;
        let topology = ClusterTopology::new(settings.shards, settings.replicas)?;
        let thresholds = median_thresholds(items.iter().map(|it| it.embedding.values()), dim)?;
        let shards = build_shards(
            items,
            &topology,
            &BuildConfig {
                band_width: settings.band_width,
                thresholds: Some(thresholds),
                ..Default::default()
            },
        )?;
        let (fusion, calibration) = calibrate(items, model_scores, settings)?;
        log::info!(
            "calibrated lambda = {:.4}, alpha = {:.2} (fused accuracy {:.3})",
            fusion.lambda,
            fusion.alpha,
            calibration.fused_accuracy
        );
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            dim,
            items: items.len(),
            topology,
            band_width: settings.band_width,
            shard_files: (0..topology.shards).map(|i| format!("shard-{i}.plti")).collect(),
            budget: settings.budget,
            fusion,
            rerank: settings.rerank,
            classifier: CentroidClassifier::fit(items, settings.centroid_temperature),
            calibration,
            deadline_ms: settings.deadline_ms,
            ensemble_file: ensemble.as_ref().map(|_| ENSEMBLE_FILE.to_string()),
        };
        let deployment = Self::local(manifest, &shards, ensemble)?;
        Ok((deployment, shards))
    }

    /// In-process replicas sharing the given snapshots.
    pub fn local(manifest: Manifest, shards: &[IndexSnapshot], ensemble: Option<TreeEnsemble>) -> ServiceResult<Self> {
        let shared: Vec<Arc<dyn ShardBackend>> = shards
            .iter()
            .map(|s| Arc::new(s.clone()) as Arc<dyn ShardBackend>)
            .collect();
        let replicas = vec![shared; manifest.topology.replicas];
        Self::from_backends(manifest, replicas, ensemble)
    }

    /// Replicas over arbitrary shard backends, one list per replica.
    pub fn from_backends(
        manifest: Manifest,
        replicas: Vec<Vec<Arc<dyn ShardBackend>>>,
        ensemble: Option<TreeEnsemble>,
    ) -> ServiceResult<Self> {
        let deadline = Duration::from_millis(manifest.deadline_ms);
        let clusters = replicas
            .into_iter()
            .map(|shards| {
                if shards.len() != manifest.topology.shards {
                    return Err(ServiceError::Config(format!(
                        "replica has {} shards, topology expects {}",
                        shards.len(),
                        manifest.topology.shards
                    )));
                }
                Ok(Cluster::new(shards, deadline)?)
            })
            .collect::<ServiceResult<Vec<_>>>()?;
        Ok(Self {
            manifest,
            cluster: ReplicatedCluster::new(clusters)?,
            ensemble,
        })
    }

    /// Writes the manifest, snapshots and ensemble into `dir`.
    pub fn save(&self, dir: &Path, shards: &[IndexSnapshot]) -> ServiceResult<()> {
        std::fs::create_dir_all(dir)?;
        for (file, snapshot) in self.manifest.shard_files.iter().zip(shards) {
            snapshot.write_to(&dir.join(file))?;
        }
        if let (Some(file), Some(e)) = (&self.manifest.ensemble_file, &self.ensemble) {
            std::fs::write(dir.join(file), e.to_json()?)?;
        }
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> ServiceResult<Manifest> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(ServiceError::Config(format!("unsupported manifest version {}", manifest.version)));
        }
        Ok(manifest)
    }

    /// Loads a saved deployment. With remote replicas configured, shards
    /// are reached over the wire instead of being read from `dir`.
    pub fn load(dir: &Path, serve: &ServeSettings) -> ServiceResult<Self> {
        let mut manifest = Self::read_manifest(dir)?;
        if let Some(ms) = serve.deadline_ms {
            manifest.deadline_ms = ms;
        }
        let ensemble = match &manifest.ensemble_file {
            Some(f) => Some(TreeEnsemble::from_json(&std::fs::read_to_string(dir.join(f))?)?),
            None => None,
        };
        if serve.replicas.is_empty() {
            let shards = manifest
                .shard_files
                .iter()
                .map(|f| IndexSnapshot::read_from(&dir.join(f)))
                .collect::<vsearch::Result<Vec<_>>>()?;
            return Self::local(manifest, &shards, ensemble);
        }
        let timeout = Duration::from_millis(manifest.deadline_ms);
        manifest.topology.replicas = serve.replicas.len();
        let replicas = serve
            .replicas
            .iter()
            .map(|endpoints| {
                endpoints
                    .iter()
                    .map(|addr| Arc::new(RemoteShard::new(addr.clone(), timeout)) as Arc<dyn ShardBackend>)
                    .collect()
            })
            .collect();
        Self::from_backends(manifest, replicas, ensemble)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn ensemble(&self) -> Option<&TreeEnsemble> {
        self.ensemble.as_ref()
    }

    pub fn cluster(&self) -> &ReplicatedCluster {
        &self.cluster
    }

    fn embedding(&self, values: &[f32]) -> ServiceResult<Embedding> {
        if values.len() != self.manifest.dim {
            return Err(vsearch::Error::Dimension { expected: self.manifest.dim, actual: values.len() }.into());
        }
        Ok(Embedding::new(values.to_vec())?)
    }

    fn gather(&self, embedding: &Embedding, budget: QueryBudget, mask: CategoryMask) -> ServiceResult<Gathered> {
        let query = ShardQuery { embedding: embedding.clone(), budget, mask };
        Ok(self.cluster.query(&query)?.1)
    }

    /// Category distribution for a query: the classifier (request scores or
    /// centroids) fused with the neighbour vote.
    pub fn predict(&self, embedding: &Embedding, model_scores: Option<&[f64]>) -> ServiceResult<(CategoryDistribution, bool)> {
        let fusion = self.manifest.fusion;
        let model = match model_scores {
            Some(s) => CategoryDistribution::from_scores(s)?,
            None => self.manifest.classifier.predict(embedding)?,
        };
        let gathered = self.gather(
            embedding,
            neighbor_budget(&self.manifest.budget, fusion.k_neighbors),
            CategoryMask::ALL,
        )?;
        let labels: HashMap<u64, Category> = gathered.coarse.iter().map(|h| (h.id, h.category)).collect();
        let neighbors = neighbors_from(&gathered.results, |id| labels.get(&id).copied());
        if neighbors.is_empty() {
            return Ok((model, gathered.partial));
        }
        let search = search_based_scores(
            &neighbors,
            &WeightParams { lambda: fusion.lambda, k_neighbors: fusion.k_neighbors },
        )?;
        Ok((fuse(&model, &search, fusion.alpha)?, gathered.partial))
    }

    /// Exhaustive retrieval within `category`: the linear-scan reference.
    /// Every item of the category reaches exact re-scoring; no Hamming cut.
    pub fn linear(&self, embedding: &[f32], category: Category, k: usize) -> ServiceResult<RankedList> {
        let embedding = self.embedding(embedding)?;
        let budget = QueryBudget::exhaustive(self.manifest.items.max(k), k);
        Ok(self.gather(&embedding, budget, CategoryMask::only(category))?.results)
    }

    pub fn query(&self, req: &QueryRequest) -> ServiceResult<QueryResponse> {
        Ok(self.execute(req)?.response)
    }

    pub fn execute(&self, req: &QueryRequest) -> ServiceResult<Execution> {
        let start = Instant::now();
        let embedding = self.embedding(&req.embedding)?;
        let (distribution, mut partial, forced) = match req.category {
            Some(c) => (CategoryDistribution::one_hot(c), false, true),
            None => {
                let (d, p) = self.predict(&embedding, req.model_scores.as_deref())?;
                (d, p, false)
            }
        };
        let category = distribution.argmax();
        let predicted_at = Instant::now();

        let budget = QueryBudget {
            k_final: req.k_final.unwrap_or(self.manifest.budget.k_final),
            ..self.manifest.budget
        };
        budget.validate()?;
        let gathered = self.gather(&embedding, budget, CategoryMask::only(category))?;
        partial |= gathered.partial;
        let retrieved_at = Instant::now();

        let quality: HashMap<u64, QualityMeta> = gathered.coarse.iter().map(|h: &CoarseHit| (h.id, h.quality)).collect();
        let results = self.finish(&gathered.results, &quality, req.skip_rerank)?;
        let done = Instant::now();

        let timings = req.return_timings.then(|| StageTimings {
            predict_us: micros(predicted_at - start),
            retrieve_us: micros(retrieved_at - predicted_at),
            rerank_us: micros(done - retrieved_at),
            total_us: micros(done - start),
        });
        Ok(Execution {
            response: QueryResponse {
                category,
                forced,
                distribution,
                results,
                partial,
                timings,
            },
            retrieval: gathered.results,
        })
    }

    /// Annotates retrieval results with quality and, unless skipped,
    /// re-ranks the top `rerank.top_n`; the tail keeps distance order.
    fn finish(
        &self,
        retrieval: &RankedList,
        quality: &HashMap<u64, QualityMeta>,
        skip_rerank: bool,
    ) -> ServiceResult<Vec<ResultEntry>> {
        let Some(ensemble) = &self.ensemble else {
            return Ok(retrieval
                .entries()
                .iter()
                .map(|e| ResultEntry { id: e.id, distance: e.distance, quality: None, score: None })
                .collect());
        };
        let scaled = |id: u64| -> ServiceResult<Option<f64>> {
            match quality.get(&id) {
                Some(q) => Ok(Some(ensemble.score(&quality_features(q))?.scaled)),
                None => Ok(None),
            }
        };
        let mut out = Vec::with_capacity(retrieval.len());
        let mut rest = retrieval.entries();
        if !skip_rerank {
            let reranked = rerank_top(retrieval, |id| quality.get(&id).copied(), ensemble, &self.manifest.rerank)?;
            for e in reranked.entries() {
                out.push(ResultEntry { id: e.id, distance: e.distance, quality: scaled(e.id)?, score: e.score });
            }
            rest = &rest[reranked.len()..];
        }
        for e in rest {
            out.push(ResultEntry { id: e.id, distance: e.distance, quality: scaled(e.id)?, score: None });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: u64, cat: usize, v: Vec<f32>) -> Item {
        Item {
            id,
            category: Category::new(cat).unwrap(),
            embedding: Embedding::new(v).unwrap(),
            quality: QualityMeta::default(),
        }
    }

    #[test]
    fn centroid_classifier_prefers_nearest_mean() {
        let items = vec![item(1, 0, vec![1.0, 0.0]), item(2, 0, vec![0.8, 0.0]), item(3, 5, vec![-1.0, 0.0])];
        let c = CentroidClassifier::fit(&items, 10.0);
        assert_eq!(c.centroids.iter().filter(|c| c.is_some()).count(), 2);
        let d = c.predict(&Embedding::new(vec![0.7, 0.1]).unwrap()).unwrap();
        assert_eq!(d.argmax().index(), 0);
        assert_eq!(d.prob(Category::new(3).unwrap()), 0.0);
    }

    #[test]
    fn empty_classifier_is_uniform() {
        let c = CentroidClassifier::fit(&[], 1.0);
        let d = c.predict(&Embedding::new(vec![1.0]).unwrap()).unwrap();
        assert!(d.probs().iter().all(|&p| (p - 1.0 / 14.0).abs() < 1e-12));
    }

    #[test]
    fn request_tolerates_unknown_fields() {
        let req: QueryRequest = serde_json::from_str(r#"{"embedding":[1.0],"future":{"x":1},"skip_rerank":true}"#).unwrap();
        assert!(req.skip_rerank);
        assert_eq!(req.embedding, vec![1.0]);
    }
}
