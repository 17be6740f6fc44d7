//! TOML configuration. Every key is optional; missing keys take the
//! defaults below and command-line flags override the file.
//!
//! ```toml
//! [ingest]
//! max_reject_fraction = 0.01
//! # dedup_hamming = 0
//!
//! [build]
//! shards = 4
//! replicas = 2
//! band_width = 16
//! k_neighbors = 30
//! validation_items = 500
//! centroid_temperature = 10.0
//! deadline_ms = 500
//! seed = 0
//!
//! [build.budget]
//! candidate_budget = 240000
//! k_coarse = 1200
//! k_final = 60
//!
//! [build.rerank]
//! beta = 0.7
//! top_n = 60
//!
//! [serve]
//! listen = "127.0.0.1:7878"
//! deadline_ms = 500
//! # Remote shard endpoints, one list per replica, in shard order.
//! replicas = [["127.0.0.1:7001", "127.0.0.1:7002"]]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use vsearch::index::{QueryBudget, DEFAULT_BAND_WIDTH};
use vsearch::rerank::RerankConfig;

use crate::error::{ServiceError, ServiceResult};
use crate::ingest::IngestConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub ingest: IngestConfig,
    pub build: BuildSettings,
    pub serve: ServeSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildSettings {
    pub shards: usize,
    pub replicas: usize,
    pub band_width: usize,
    pub budget: QueryBudget,
    /// Neighbours in the search-based category vote.
    pub k_neighbors: usize,
    /// Items held out to fit the kernel bandwidth and fusion weight.
    pub validation_items: usize,
    /// Sharpness of the centroid classifier used when a request carries no
    /// classifier scores.
    pub centroid_temperature: f64,
    pub rerank: RerankConfig,
    pub deadline_ms: u64,
    pub seed: u64,
}

impl Default for BuildSettings {
    fn default() -> Self {
        Self {
            shards: 1,
            replicas: 1,
            band_width: DEFAULT_BAND_WIDTH,
            budget: QueryBudget::default(),
            k_neighbors: 30,
            validation_items: 500,
            centroid_temperature: 10.0,
            rerank: RerankConfig::default(),
            deadline_ms: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeSettings {
    pub listen: String,
    /// Overrides the deployment's per-shard deadline.
    pub deadline_ms: Option<u64>,
    /// Remote shard endpoints per replica; empty means in-process shards.
    pub replicas: Vec<Vec<String>>,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7878".into(),
            deadline_ms: None,
            replicas: Vec::new(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> ServiceResult<Self> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> ServiceResult<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The file at `path` if given, otherwise defaults.
    pub fn load_or_default(path: Option<&Path>) -> ServiceResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
