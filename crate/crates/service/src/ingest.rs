//! JSONL ingestion of items, classifier scores and click logs.
//!
//! Every file is read line by line. A line that fails to parse or validate
//! becomes a [`Reject`] carrying its 1-based line number; the file as a whole
//! is refused once rejects exceed the configured fraction of its non-blank
//! lines. Accepted items are deduplicated by binary code before the
//! inventory is handed on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vsearch::index::dedup;
use vsearch::mining::{ClickLogLine, ClickLogRecord};
use vsearch::model::{median_thresholds, Category, Embedding, Item, QualityMeta, NUM_CATEGORIES};

use crate::error::{ServiceError, ServiceResult};

/// Items JSONL line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemLine {
    pub id: u64,
    pub category: Category,
    pub vec: Vec<f32>,
    pub quality: QualityMeta,
}

impl From<&Item> for ItemLine {
    fn from(it: &Item) -> Self {
        Self {
            id: it.id,
            category: it.category,
            vec: it.embedding.values().to_vec(),
            quality: it.quality,
        }
    }
}

impl TryFrom<ItemLine> for Item {
    type Error = vsearch::Error;

    fn try_from(line: ItemLine) -> vsearch::Result<Item> {
        line.quality.validate()?;
        Ok(Item {
            id: line.id,
            category: line.category,
            embedding: Embedding::new(line.vec)?,
            quality: line.quality,
        })
    }
}

/// Model-scores JSONL line: one classifier score per category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScoreLine {
    pub id: u64,
    pub scores: Vec<f32>,
}

/// Extra feature-channel JSONL line used for triplet mining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorLine {
    pub id: u64,
    pub vec: Vec<f32>,
}

/// Quality re-rank training JSONL line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankRow {
    pub features: BTreeMap<String, f64>,
    pub label: u8,
}

/// A refused input line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub file: String,
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Reject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.file, self.line, self.message)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// A file is refused when more than this fraction of its lines is rejected.
    pub max_reject_fraction: f64,
    /// Items within this Hamming distance of an earlier item are dropped;
    /// `None` disables deduplication.
    pub dedup_hamming: Option<u32>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            max_reject_fraction: 0.01,
            dedup_hamming: None,
        }
    }
}

/// Parsed lines of one file.
struct Parsed<T> {
    values: Vec<T>,
    rejects: Vec<Reject>,
    lines: usize,
}

fn read_lines<R, T, F>(name: &str, reader: R, mut parse: F) -> ServiceResult<Parsed<T>>
where
    R: BufRead,
    F: FnMut(&str) -> Result<T, String>,
{
    let mut out = Parsed {
        values: Vec::new(),
        rejects: Vec::new(),
        lines: 0,
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.lines += 1;
        match parse(&line) {
            Ok(v) => out.values.push(v),
            Err(message) => out.rejects.push(Reject {
                file: name.to_string(),
                line: i + 1,
                message,
            }),
        }
    }
    Ok(out)
}

fn check_threshold<T>(name: &str, parsed: &Parsed<T>, cfg: &IngestConfig) -> ServiceResult<()> {
    let rejected = parsed.rejects.len();
    if rejected as f64 > cfg.max_reject_fraction * parsed.lines as f64 {
        return Err(ServiceError::Ingest {
            file: name.to_string(),
            rejected,
            lines: parsed.lines,
            rejects: parsed.rejects.clone(),
        });
    }
    for r in &parsed.rejects {
        log::warn!("rejected {r}");
    }
    Ok(())
}

/// Reads items, rejecting malformed lines, mixed dimensions and repeated ids.
pub fn read_items<R: BufRead>(name: &str, reader: R, cfg: &IngestConfig) -> ServiceResult<(Vec<Item>, Vec<Reject>)> {
    let mut dim = None;
    let mut seen = BTreeSet::new();
    let parsed = read_lines(name, reader, |line| {
        let raw: ItemLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let item = Item::try_from(raw).map_err(|e| e.to_string())?;
        let d = *dim.get_or_insert(item.embedding.dim());
        if item.embedding.dim() != d {
            return Err(format!("dimension {} differs from {d}", item.embedding.dim()));
        }
        if !seen.insert(item.id) {
            return Err(format!("duplicate id {}", item.id));
        }
        Ok(item)
    })?;
    check_threshold(name, &parsed, cfg)?;
    Ok((parsed.values, parsed.rejects))
}

/// Reads classifier scores; every id must name a known item.
pub fn read_model_scores<R: BufRead>(
    name: &str,
    reader: R,
    known: &BTreeSet<u64>,
    cfg: &IngestConfig,
) -> ServiceResult<(BTreeMap<u64, Vec<f32>>, Vec<Reject>)> {
    let mut seen = BTreeSet::new();
    let parsed = read_lines(name, reader, |line| {
        let raw: ModelScoreLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if raw.scores.len() != NUM_CATEGORIES {
            return Err(format!("expected {NUM_CATEGORIES} scores, got {}", raw.scores.len()));
        }
        if raw.scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err("scores must be finite and non-negative".into());
        }
        if !known.contains(&raw.id) {
            return Err(format!("unknown item {}", raw.id));
        }
        if !seen.insert(raw.id) {
            return Err(format!("duplicate id {}", raw.id));
        }
        Ok((raw.id, raw.scores))
    })?;
    check_threshold(name, &parsed, cfg)?;
    Ok((parsed.values.into_iter().collect(), parsed.rejects))
}

/// Reads click-log records; every returned item must be known.
pub fn read_click_logs<R: BufRead>(
    name: &str,
    reader: R,
    known: &BTreeSet<u64>,
    cfg: &IngestConfig,
) -> ServiceResult<(Vec<ClickLogRecord>, Vec<Reject>)> {
    let parsed = read_lines(name, reader, |line| {
        let raw: ClickLogLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let record = ClickLogRecord::try_from(raw).map_err(|e| e.to_string())?;
        if let Some(id) = record.returned.iter().find(|id| !known.contains(id)) {
            return Err(format!("unknown item {id}"));
        }
        Ok(record)
    })?;
    check_threshold(name, &parsed, cfg)?;
    Ok((parsed.values, parsed.rejects))
}

/// Reads an extra feature channel as `id -> embedding`.
pub fn read_vectors<R: BufRead>(
    name: &str,
    reader: R,
    cfg: &IngestConfig,
) -> ServiceResult<std::collections::HashMap<u64, Embedding>> {
    let parsed = read_lines(name, reader, |line| {
        let raw: VectorLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
        Ok((raw.id, Embedding::new(raw.vec).map_err(|e| e.to_string())?))
    })?;
    check_threshold(name, &parsed, cfg)?;
    Ok(parsed.values.into_iter().collect())
}

/// Reads re-rank training rows; labels must be 0 or 1.
pub fn read_rerank_rows<R: BufRead>(
    name: &str,
    reader: R,
    cfg: &IngestConfig,
) -> ServiceResult<Vec<(vsearch::rerank::Features, bool)>> {
    let parsed = read_lines(name, reader, |line| {
        let raw: RerankRow = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let label = match raw.label {
            0 => false,
            1 => true,
            other => return Err(format!("label must be 0 or 1, got {other}")),
        };
        if raw.features.values().any(|v| !v.is_finite()) {
            return Err("non-finite feature".into());
        }
        Ok((raw.features.into_iter().collect(), label))
    })?;
    check_threshold(name, &parsed, cfg)?;
    Ok(parsed.values)
}

/// A validated, deduplicated inventory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Inventory {
    /// Ascending by id.
    pub items: Vec<Item>,
    pub model_scores: BTreeMap<u64, Vec<f32>>,
    pub click_logs: Vec<ClickLogRecord>,
    pub rejects: Vec<Reject>,
    /// Ids dropped as near-duplicates of a kept item.
    pub duplicates_removed: Vec<u64>,
}

/// Input files for [`ingest`]; only the items file is required.
#[derive(Clone, Debug, Default)]
pub struct IngestPaths {
    pub items: PathBuf,
    pub model_scores: Option<PathBuf>,
    pub click_logs: Option<PathBuf>,
}

/// Per-file SHA-256 of the canonical export.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checksums {
    pub items: String,
    pub model_scores: String,
    pub click_logs: String,
}

fn open(path: &Path) -> ServiceResult<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn display_name(path: &Path) -> String {
    path.display().to_string()
}

/// Reads and validates the given files, then removes duplicate items.
pub fn ingest(paths: &IngestPaths, cfg: &IngestConfig) -> ServiceResult<Inventory> {
    let items_name = display_name(&paths.items);
    let (items, mut rejects) = read_items(&items_name, open(&paths.items)?, cfg)?;
    let known: BTreeSet<u64> = items.iter().map(|it| it.id).collect();

    let mut model_scores = BTreeMap::new();
    if let Some(p) = &paths.model_scores {
        let (scores, r) = read_model_scores(&display_name(p), open(p)?, &known, cfg)?;
        model_scores = scores;
        rejects.extend(r);
    }
    let mut click_logs = Vec::new();
    if let Some(p) = &paths.click_logs {
        let (logs, r) = read_click_logs(&display_name(p), open(p)?, &known, cfg)?;
        click_logs = logs;
        rejects.extend(r);
    }
    assemble(items, model_scores, click_logs, rejects, cfg)
}

/// Deduplicates `items` and drops references to removed items.
///
/// Click-log records lose removed ids from their lists; a record left with
/// nothing returned is dropped.
pub fn assemble(
    mut items: Vec<Item>,
    mut model_scores: BTreeMap<u64, Vec<f32>>,
    mut click_logs: Vec<ClickLogRecord>,
    rejects: Vec<Reject>,
    cfg: &IngestConfig,
) -> ServiceResult<Inventory> {
    items.sort_by_key(|it| it.id);
    let mut duplicates_removed = Vec::new();
    if let (Some(t), Some(first)) = (cfg.dedup_hamming, items.first()) {
        let dim = first.embedding.dim();
        let thresholds = median_thresholds(items.iter().map(|it| it.embedding.values()), dim)?;
        let kept = dedup(&items, &thresholds, t)?;
        let kept_ids: BTreeSet<u64> = kept.iter().map(|it| it.id).collect();
        duplicates_removed = items.iter().map(|it| it.id).filter(|id| !kept_ids.contains(id)).collect();
        items = kept;
        items.sort_by_key(|it| it.id);
    }
    if !duplicates_removed.is_empty() {
        log::info!("dedup removed {} items", duplicates_removed.len());
        let removed: BTreeSet<u64> = duplicates_removed.iter().copied().collect();
        model_scores.retain(|id, _| !removed.contains(id));
        for r in &mut click_logs {
            r.returned.retain(|id| !removed.contains(id));
            r.clicked.retain(|id| !removed.contains(id));
        }
        click_logs.retain(|r| !r.returned.is_empty());
    }
    Ok(Inventory {
        items,
        model_scores,
        click_logs,
        rejects,
        duplicates_removed,
    })
}

fn write_jsonl<W: Write, T: Serialize>(mut w: W, rows: impl IntoIterator<Item = T>) -> ServiceResult<()> {
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl Inventory {
    pub fn write_items<W: Write>(&self, w: W) -> ServiceResult<()> {
        write_jsonl(w, self.items.iter().map(ItemLine::from))
    }

    pub fn write_model_scores<W: Write>(&self, w: W) -> ServiceResult<()> {
        write_jsonl(
            w,
            self.model_scores.iter().map(|(&id, s)| ModelScoreLine { id, scores: s.clone() }),
        )
    }

    pub fn write_click_logs<W: Write>(&self, w: W) -> ServiceResult<()> {
        write_jsonl(w, self.click_logs.iter().map(ClickLogLine::from))
    }

    pub fn checksums(&self) -> ServiceResult<Checksums> {
        let mut items = Vec::new();
        let mut scores = Vec::new();
        let mut logs = Vec::new();
        self.write_items(&mut items)?;
        self.write_model_scores(&mut scores)?;
        self.write_click_logs(&mut logs)?;
        Ok(Checksums {
            items: sha256_hex(&items),
            model_scores: sha256_hex(&scores),
            click_logs: sha256_hex(&logs),
        })
    }

    /// Writes `items.jsonl`, `model_scores.jsonl` and `click_logs.jsonl`
    /// into `dir` and returns their checksums.
    pub fn export(&self, dir: &Path) -> ServiceResult<(IngestPaths, Checksums)> {
        std::fs::create_dir_all(dir)?;
        let paths = IngestPaths {
            items: dir.join("items.jsonl"),
            model_scores: Some(dir.join("model_scores.jsonl")),
            click_logs: Some(dir.join("click_logs.jsonl")),
        };
        self.write_items(std::io::BufWriter::new(File::create(&paths.items)?))?;
        self.write_model_scores(std::io::BufWriter::new(File::create(paths.model_scores.as_ref().unwrap())?))?;
        self.write_click_logs(std::io::BufWriter::new(File::create(paths.click_logs.as_ref().unwrap())?))?;
        Ok((paths, self.checksums()?))
    }

    /// Classifier scores of an item as `f64`, if supplied.
    pub fn scores_of(&self, id: u64) -> Option<Vec<f64>> {
        self.model_scores
            .get(&id)
            .map(|s| s.iter().map(|&v| f64::from(v)).collect())
    }
}
