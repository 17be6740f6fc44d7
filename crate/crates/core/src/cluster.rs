//! Sharded scatter-gather and replica routing.
//!
//! Items are assigned to shards by a hash of their id. A query is sent to
//! every shard concurrently; each shard answers with its coarse stage (top
//! `k_coarse` by Hamming distance, annotated with float distances). The
//! merger k-way merges those lists by `(hamming, id)`, keeps the global
//! `k_coarse`, and then ranks by `(float distance, id)`. Since a shard's
//! local top `k_coarse` contains every member of the global top `k_coarse`
//! that lives on it, the result equals the unsharded two-stage ranking
//! whenever each shard's budget covers the shard.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{build, rank_hits, BuildConfig, CategoryMask, CoarseHit, IndexSnapshot, QueryBudget};
use crate::model::{median_thresholds, BinarizationRule, Embedding, Item, RankedList};

pub const DEFAULT_DEADLINE: Duration = Duration::from_millis(500);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterTopology {
    pub shards: usize,
    pub replicas: usize,
}

impl Default for ClusterTopology {
    fn default() -> Self {
        Self { shards: 1, replicas: 1 }
    }
}

impl ClusterTopology {
    pub fn new(shards: usize, replicas: usize) -> Result<Self> {
        let t = Self { shards, replicas };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shards == 0 || self.replicas == 0 {
            return Err(Error::InvalidParam("shard and replica counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; spreads sequential ids evenly.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn shard_of(id: u64, shards: usize) -> usize {
    (mix(id) % shards as u64) as usize
}

pub fn partition(items: &[Item], topology: &ClusterTopology) -> Vec<Vec<Item>> {
    let shards = topology.shards.max(1);
    let mut out = vec![Vec::new(); shards];
    for it in items {
        out[shard_of(it.id, shards)].push(it.clone());
    }
    out
}

/// Builds one snapshot per shard, all binarized with inventory-wide thresholds.
pub fn build_shards(items: &[Item], topology: &ClusterTopology, cfg: &BuildConfig) -> Result<Vec<IndexSnapshot>> {
    topology.validate()?;
    let mut cfg = cfg.clone();
    if cfg.thresholds.is_none() {
        let dim = items.first().map_or(0, |it| it.embedding.dim());
        cfg.thresholds = Some(match cfg.binarization {
            BinarizationRule::Median => median_thresholds(items.iter().map(|it| it.embedding.values()), dim)?,
            BinarizationRule::Sign => vec![0.0; dim],
        });
    }
    partition(items, topology)
        .iter()
        .map(|shard| build(shard, &cfg))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardQuery {
    pub embedding: Embedding,
    pub budget: QueryBudget,
    pub mask: CategoryMask,
}

/// Anything that can answer the coarse stage for one shard: an in-process
/// snapshot or a remote service.
pub trait ShardBackend: Send + Sync {
    fn coarse(&self, query: &ShardQuery) -> Result<Vec<CoarseHit>>;
}

impl ShardBackend for IndexSnapshot {
    fn coarse(&self, query: &ShardQuery) -> Result<Vec<CoarseHit>> {
        self.coarse_hits(&query.embedding, &query.budget, query.mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ShardStatus {
    Ok,
    Failed { reason: String },
    Timeout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardResult {
    pub shard: usize,
    /// Empty unless the status is `Ok`.
    pub hits: Vec<CoarseHit>,
    pub status: ShardStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gathered {
    pub results: RankedList,
    /// Merged coarse stage, ordered by `(hamming, id)`.
    pub coarse: Vec<CoarseHit>,
    pub partial: bool,
    pub shards: Vec<ShardResult>,
}

/// K-way merge of `(hamming, id)`-sorted lists, keeping the first `k`.
pub fn merge_coarse(lists: &[&[CoarseHit]], k: usize) -> Vec<CoarseHit> {
    let mut heap = BinaryHeap::new();
    for (l, list) in lists.iter().enumerate() {
        if let Some(h) = list.first() {
            heap.push(Reverse((h.hamming, h.id, l, 0usize)));
        }
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let Some(Reverse((_, _, l, i))) = heap.pop() else { break };
        out.push(lists[l][i]);
        if let Some(h) = lists[l].get(i + 1) {
            heap.push(Reverse((h.hamming, h.id, l, i + 1)));
        }
    }
    out
}

/// One replica: a full set of shards.
#[derive(Clone)]
pub struct Cluster {
    shards: Vec<Arc<dyn ShardBackend>>,
    deadline: Duration,
}

impl Cluster {
    pub fn new(shards: Vec<Arc<dyn ShardBackend>>, deadline: Duration) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::InvalidParam("a cluster needs at least one shard".into()));
        }
        Ok(Self { shards, deadline })
    }

    pub fn local(snapshots: Vec<IndexSnapshot>, deadline: Duration) -> Result<Self> {
        Self::new(
            snapshots
                .into_iter()
                .map(|s| Arc::new(s) as Arc<dyn ShardBackend>)
                .collect(),
            deadline,
        )
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    /// Queries every shard concurrently, waiting at most the deadline.
    pub fn scatter(&self, query: &ShardQuery) -> Vec<ShardResult> {
        if self.shards.len() == 1 {
            // nothing to overlap; answer inline
            return vec![finish(0, self.shards[0].coarse(query))];
        }
        let (tx, rx) = mpsc::channel();
        let query = Arc::new(query.clone());
        for (i, shard) in self.shards.iter().enumerate() {
            let (tx, shard, query) = (tx.clone(), Arc::clone(shard), Arc::clone(&query));
            thread::spawn(move || {
                // the receiver may have given up; a failed send is fine
                let _ = tx.send((i, shard.coarse(&query)));
            });
        }
        drop(tx);
        let mut results: Vec<Option<ShardResult>> = vec![None; self.shards.len()];
        let end = Instant::now() + self.deadline;
        let mut pending = self.shards.len();
        while pending > 0 {
            let now = Instant::now();
            if now >= end {
                break;
            }
            match rx.recv_timeout(end - now) {
                Ok((i, r)) => {
                    results[i] = Some(finish(i, r));
                    pending -= 1;
                }
                Err(_) => break,
            }
        }
        results
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.unwrap_or(ShardResult {
                    shard: i,
                    hits: Vec::new(),
                    status: ShardStatus::Timeout,
                })
            })
            .collect()
    }

    pub fn scatter_gather(&self, query: &ShardQuery) -> Result<Gathered> {
        query.budget.validate()?;
        let shards = self.scatter(query);
        let live: Vec<&[CoarseHit]> = shards
            .iter()
            .filter(|r| r.status == ShardStatus::Ok)
            .map(|r| r.hits.as_slice())
            .collect();
        if live.is_empty() {
            let reasons: Vec<String> = shards.iter().map(|r| format!("{}: {:?}", r.shard, r.status)).collect();
            return Err(Error::Unavailable(reasons.join("; ")));
        }
        let partial = live.len() < shards.len();
        let coarse = merge_coarse(&live, query.budget.k_coarse);
        let results = rank_hits(&coarse, query.budget.k_final);
        Ok(Gathered {
            results,
            coarse,
            partial,
            shards,
        })
    }
}

fn finish(shard: usize, r: Result<Vec<CoarseHit>>) -> ShardResult {
    match r {
        Ok(hits) => ShardResult {
            shard,
            hits,
            status: ShardStatus::Ok,
        },
        Err(e) => ShardResult {
            shard,
            hits: Vec::new(),
            status: ShardStatus::Failed { reason: e.to_string() },
        },
    }
}

/// Round-robin replica assignment.
#[derive(Debug, Default)]
pub struct Router {
    replicas: usize,
    next: AtomicUsize,
}

impl Router {
    pub fn new(replicas: usize) -> Result<Self> {
        if replicas == 0 {
            return Err(Error::InvalidParam("replica count must be >= 1".into()));
        }
        Ok(Self {
            replicas,
            next: AtomicUsize::new(0),
        })
    }

    pub fn next_replica(&self) -> usize {
        self.next.fetch_add(1, Ordering::Relaxed) % self.replicas
    }
}

/// Replica index of each of `queries` consecutive queries.
pub fn route(queries: usize, replicas: usize) -> Result<Vec<usize>> {
    let router = Router::new(replicas)?;
    Ok((0..queries).map(|_| router.next_replica()).collect())
}

/// `R` replicas of the same sharded cluster behind a round-robin router.
pub struct ReplicatedCluster {
    replicas: Vec<Cluster>,
    router: Router,
}

impl ReplicatedCluster {
    pub fn new(replicas: Vec<Cluster>) -> Result<Self> {
        let router = Router::new(replicas.len())?;
        Ok(Self { replicas, router })
    }

    pub fn replica_count(&self) -> usize {
        self.replicas.len()
    }

    pub fn replica(&self, i: usize) -> &Cluster {
        &self.replicas[i]
    }

    /// Answers on the next replica in turn; returns the replica used.
    pub fn query(&self, query: &ShardQuery) -> Result<(usize, Gathered)> {
        let r = self.router.next_replica();
        Ok((r, self.replicas[r].scatter_gather(query)?))
    }
}
