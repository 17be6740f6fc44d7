//! Single-shard two-stage retrieval.
//!
//! Items are binarized against per-dimension thresholds and indexed in a
//! banded inverted index: the code is cut into bands of `w` bits and every
//! band keeps a posting list per band value. A query gathers candidates from
//! exact band matches, then from all 1-bit band perturbations, and finally
//! (only if budget is left) from the remaining items in id order. Candidates
//! are ranked by full-code Hamming distance and the survivors re-ranked by
//! exact float L2 distance.
//!
//! Because gathering always proceeds in the same order, a larger budget
//! yields a superset of candidates, and a budget covering the inventory is an
//! exhaustive scan.

mod format;

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    binarize_slice, hamming_words, median_thresholds, squared_l2, words_for, BinarizationRule,
    BinaryCode, Category, Embedding, Item, QualityMeta, RankedEntry, RankedList, NUM_CATEGORIES,
};

pub use format::{MAGIC, VERSION};

pub const DEFAULT_BAND_WIDTH: usize = 16;
pub const DEFAULT_K_COARSE: usize = 1200;
pub const DEFAULT_K_FINAL: usize = 60;
/// 200 candidates per coarse slot.
pub const DEFAULT_CANDIDATE_BUDGET: usize = 200 * DEFAULT_K_COARSE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryBudget {
    /// Maximum number of candidates the coarse filter may gather.
    pub candidate_budget: usize,
    pub k_coarse: usize,
    pub k_final: usize,
}

impl Default for QueryBudget {
    fn default() -> Self {
        Self {
            candidate_budget: DEFAULT_CANDIDATE_BUDGET,
            k_coarse: DEFAULT_K_COARSE,
            k_final: DEFAULT_K_FINAL,
        }
    }
}

impl QueryBudget {
    pub fn validate(&self) -> Result<()> {
        if self.k_final > self.k_coarse || self.k_coarse > self.candidate_budget {
            return Err(Error::InvalidParam(format!(
                "need k_final <= k_coarse <= candidate_budget, got {} / {} / {}",
                self.k_final, self.k_coarse, self.candidate_budget
            )));
        }
        Ok(())
    }

    /// A budget large enough that the coarse filter degenerates to a full scan.
    pub fn exhaustive(k_coarse: usize, k_final: usize) -> Self {
        Self {
            candidate_budget: usize::MAX,
            k_coarse,
            k_final,
        }
    }
}

/// Set of categories a query may return.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CategoryMask(u16);

impl CategoryMask {
    pub const ALL: CategoryMask = CategoryMask((1 << NUM_CATEGORIES) - 1);

    pub fn only(c: Category) -> Self {
        Self(1 << c.index())
    }

    pub fn from_bits(bits: u16) -> Self {
        Self(bits & Self::ALL.0)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    #[inline]
    pub fn contains(self, c: Category) -> bool {
        self.0 & (1 << c.index()) != 0
    }
}

impl Default for CategoryMask {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub band_width: usize,
    pub binarization: BinarizationRule,
    /// Fixed thresholds, e.g. inventory-wide medians shared by every shard.
    /// Overrides `binarization` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f32>>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            band_width: DEFAULT_BAND_WIDTH,
            binarization: BinarizationRule::Median,
            thresholds: None,
        }
    }
}

/// One band of the posting index in compressed-row form: the positions of
/// items whose band value is `v` are `positions[offsets[v]..offsets[v + 1]]`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Band {
    pub(crate) start: usize,
    pub(crate) bits: usize,
    pub(crate) offsets: Vec<u32>,
    pub(crate) positions: Vec<u32>,
}

impl Band {
    fn list(&self, value: usize) -> &[u32] {
        let lo = self.offsets[value] as usize;
        let hi = self.offsets[value + 1] as usize;
        &self.positions[lo..hi]
    }
}

/// Banded posting lists over item positions; positions follow ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct PostingIndex {
    pub(crate) band_width: usize,
    pub(crate) bands: Vec<Band>,
}

impl PostingIndex {
    fn build(codes: &[u64], words: usize, code_bits: usize, band_width: usize) -> Self {
        let n = if words == 0 { 0 } else { codes.len() / words };
        let bands = band_layout(code_bits, band_width)
            .map(|r| {
                let bits = r.len();
                let mut counts = vec![0u32; (1 << bits) + 1];
                for i in 0..n {
                    let v = band_value(&codes[i * words..(i + 1) * words], r.start, bits);
                    counts[v + 1] += 1;
                }
                for v in 1..counts.len() {
                    counts[v] += counts[v - 1];
                }
                let offsets = counts.clone();
                let mut cursor = counts;
                let mut positions = vec![0u32; n];
                for i in 0..n {
                    let v = band_value(&codes[i * words..(i + 1) * words], r.start, bits);
                    positions[cursor[v] as usize] = i as u32;
                    cursor[v] += 1;
                }
                Band {
                    start: r.start,
                    bits,
                    offsets,
                    positions,
                }
            })
            .collect();
        Self { band_width, bands }
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn band_width(&self) -> usize {
        self.band_width
    }

    /// Sorted item positions whose band `b` equals `value`.
    pub fn postings(&self, b: usize, value: usize) -> &[u32] {
        self.bands[b].list(value)
    }
}

fn band_layout(code_bits: usize, band_width: usize) -> impl Iterator<Item = Range<usize>> {
    (0..code_bits)
        .step_by(band_width.max(1))
        .map(move |s| s..(s + band_width).min(code_bits))
}

#[inline]
fn band_value(words: &[u64], start: usize, bits: usize) -> usize {
    let w = start / 64;
    let o = start % 64;
    let mut v = words[w] >> o;
    if o + bits > 64 {
        v |= words[w + 1] << (64 - o);
    }
    (v & ((1u64 << bits) - 1)) as usize
}

/// A coarse candidate with both its Hamming and exact float distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseHit {
    pub id: u64,
    pub hamming: u32,
    pub distance: f64,
    pub category: Category,
    pub quality: QualityMeta,
}

/// Immutable built index.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexSnapshot {
    pub(crate) dim: usize,
    pub(crate) thresholds: Vec<f32>,
    pub(crate) ids: Vec<u64>,
    pub(crate) categories: Vec<Category>,
    pub(crate) codes: Vec<u64>,
    pub(crate) embeddings: Vec<f32>,
    pub(crate) quality: Vec<QualityMeta>,
    pub(crate) postings: PostingIndex,
}

/// Builds a snapshot. Items may arrive in any order; the snapshot stores
/// them by ascending id.
pub fn build(items: &[Item], cfg: &BuildConfig) -> Result<IndexSnapshot> {
    if !(1..=16).contains(&cfg.band_width) {
        return Err(Error::InvalidParam(format!(
            "band width must be in 1..=16, got {}",
            cfg.band_width
        )));
    }
    if items.len() > u32::MAX as usize {
        return Err(Error::Build("too many items for one shard".into()));
    }
    let dim = match (&cfg.thresholds, items.first()) {
        (Some(t), _) => t.len(),
        (None, Some(it)) => it.embedding.dim(),
        (None, None) => 0,
    };
    let mut order: Vec<&Item> = items.iter().collect();
    order.sort_by_key(|it| it.id);
    for pair in order.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(Error::Build(format!("duplicate id {}", pair[0].id)));
        }
    }
    if let Some(bad) = order.iter().find(|it| it.embedding.dim() != dim) {
        return Err(Error::dim(dim, bad.embedding.dim()));
    }
    let thresholds = match (&cfg.thresholds, cfg.binarization) {
        (Some(t), _) => t.clone(),
        (None, BinarizationRule::Median) => {
            median_thresholds(order.iter().map(|it| it.embedding.values()), dim)?
        }
        (None, BinarizationRule::Sign) => vec![0.0; dim],
    };

    let words = words_for(dim);
    let n = order.len();
    let mut codes = Vec::with_capacity(n * words);
    let mut embeddings = Vec::with_capacity(n * dim);
    for it in &order {
        let code = binarize_slice(it.embedding.values(), &thresholds)?;
        codes.extend_from_slice(code.words());
        embeddings.extend_from_slice(it.embedding.values());
    }
    let postings = PostingIndex::build(&codes, words, dim, cfg.band_width);
    Ok(IndexSnapshot {
        dim,
        thresholds,
        ids: order.iter().map(|it| it.id).collect(),
        categories: order.iter().map(|it| it.category).collect(),
        codes,
        embeddings,
        quality: order.iter().map(|it| it.quality).collect(),
        postings,
    })
}

impl IndexSnapshot {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Embedding dimension, which is also the code length in bits.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn thresholds(&self) -> &[f32] {
        &self.thresholds
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn postings(&self) -> &PostingIndex {
        &self.postings
    }

    fn words(&self) -> usize {
        words_for(self.dim)
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn code_at(&self, pos: usize) -> &[u64] {
        let w = self.words();
        &self.codes[pos * w..(pos + 1) * w]
    }

    pub fn embedding_at(&self, pos: usize) -> &[f32] {
        &self.embeddings[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn category_of(&self, id: u64) -> Option<Category> {
        self.position(id).map(|p| self.categories[p])
    }

    pub fn quality_of(&self, id: u64) -> Option<QualityMeta> {
        self.position(id).map(|p| self.quality[p])
    }

    /// Reconstructs the indexed item with id `id`.
    pub fn item(&self, id: u64) -> Option<Item> {
        let p = self.position(id)?;
        Some(Item {
            id,
            category: self.categories[p],
            embedding: Embedding::new(self.embedding_at(p).to_vec()).ok()?,
            quality: self.quality[p],
        })
    }

    pub fn items(&self) -> impl Iterator<Item = Item> + '_ {
        self.ids.iter().map(|&id| self.item(id).expect("indexed id"))
    }

    pub fn binarize(&self, e: &Embedding) -> Result<BinaryCode> {
        binarize_slice(e.values(), &self.thresholds)
    }

    /// Item positions the coarse filter would consider, in gathering order.
    pub fn gather(&self, code: &BinaryCode, budget: usize, mask: CategoryMask) -> Result<Vec<u32>> {
        if code.len() != self.dim {
            return Err(Error::dim(self.dim, code.len()));
        }
        let n = self.len();
        let passes = |p: usize| mask.contains(self.categories[p]);
        if budget >= n {
            // every admissible item would be gathered anyway
            return Ok((0..n).filter(|&p| passes(p)).map(|p| p as u32).collect());
        }
        let mut seen = vec![false; n];
        let mut out = Vec::with_capacity(budget.min(n));
        let mut take = |p: u32, out: &mut Vec<u32>| -> bool {
            let pu = p as usize;
            if !seen[pu] {
                seen[pu] = true;
                if passes(pu) {
                    out.push(p);
                }
            }
            out.len() >= budget
        };
        let q = code.words();
        let keys: Vec<usize> = self
            .postings
            .bands
            .iter()
            .map(|b| band_value(q, b.start, b.bits))
            .collect();
        for (band, &key) in self.postings.bands.iter().zip(&keys) {
            for &p in band.list(key) {
                if take(p, &mut out) {
                    return Ok(out);
                }
            }
        }
        for (band, &key) in self.postings.bands.iter().zip(&keys) {
            for bit in 0..band.bits {
                for &p in band.list(key ^ (1 << bit)) {
                    if take(p, &mut out) {
                        return Ok(out);
                    }
                }
            }
        }
        for p in 0..n as u32 {
            if take(p, &mut out) {
                break;
            }
        }
        Ok(out)
    }

    /// Top `k` gathered positions by `(hamming, id)`.
    fn top_hamming(&self, code: &BinaryCode, positions: &[u32], k: usize) -> Vec<(u32, u32)> {
        let q = code.words();
        let mut keyed: Vec<u64> = positions
            .iter()
            .map(|&p| (u64::from(hamming_words(q, self.code_at(p as usize))) << 32) | u64::from(p))
            .collect();
        if keyed.len() > k {
            if k == 0 {
                return Vec::new();
            }
            keyed.select_nth_unstable(k - 1);
            keyed.truncate(k);
        }
        keyed.sort_unstable();
        keyed
            .into_iter()
            .map(|key| ((key >> 32) as u32, key as u32))
            .collect()
    }

    /// Coarse stage: Hamming-ranked top `k_coarse` among gathered candidates.
    /// Entry distances are Hamming distances.
    pub fn coarse_search(
        &self,
        code: &BinaryCode,
        budget: &QueryBudget,
        mask: CategoryMask,
    ) -> Result<RankedList> {
        let gathered = self.gather(code, budget.candidate_budget, mask)?;
        let entries = self
            .top_hamming(code, &gathered, budget.k_coarse)
            .into_iter()
            .map(|(h, p)| RankedEntry::new(self.ids[p as usize], f64::from(h)))
            .collect();
        Ok(RankedList::from_sorted_unchecked(entries))
    }

    fn float_distance(&self, query: &Embedding, pos: usize) -> f64 {
        squared_l2(query.values(), self.embedding_at(pos)).sqrt()
    }

    /// Fine stage: exact L2 re-scoring of `candidates`, top `k_final`.
    pub fn fine_rerank(
        &self,
        query: &Embedding,
        candidates: &RankedList,
        k_final: usize,
    ) -> Result<RankedList> {
        if query.dim() != self.dim {
            return Err(Error::dim(self.dim, query.dim()));
        }
        let mut entries = Vec::with_capacity(candidates.len());
        for e in candidates.entries() {
            let p = self
                .position(e.id)
                .ok_or_else(|| Error::CorruptIndex(format!("candidate {} not in snapshot", e.id)))?;
            entries.push(RankedEntry::new(e.id, self.float_distance(query, p)));
        }
        let mut list = RankedList::from_unsorted(entries)?;
        list.truncate(k_final);
        Ok(list)
    }

    /// Coarse candidates annotated with float distances, ordered by
    /// `(hamming, id)`. This is what a shard reports to the merger.
    pub fn coarse_hits(
        &self,
        query: &Embedding,
        budget: &QueryBudget,
        mask: CategoryMask,
    ) -> Result<Vec<CoarseHit>> {
        budget.validate()?;
        let code = self.binarize(query)?;
        let gathered = self.gather(&code, budget.candidate_budget, mask)?;
        Ok(self
            .top_hamming(&code, &gathered, budget.k_coarse)
            .into_iter()
            .map(|(h, p)| {
                let p = p as usize;
                CoarseHit {
                    id: self.ids[p],
                    hamming: h,
                    distance: self.float_distance(query, p),
                    category: self.categories[p],
                    quality: self.quality[p],
                }
            })
            .collect())
    }

    /// Full two-stage query.
    pub fn search(
        &self,
        query: &Embedding,
        budget: &QueryBudget,
        mask: CategoryMask,
    ) -> Result<RankedList> {
        let hits = self.coarse_hits(query, budget, mask)?;
        Ok(rank_hits(&hits, budget.k_final))
    }
}

/// Orders hits by `(float distance, id)` and keeps `k`.
pub fn rank_hits(hits: &[CoarseHit], k: usize) -> RankedList {
    let mut entries: Vec<RankedEntry> = hits
        .iter()
        .map(|h| RankedEntry::new(h.id, h.distance))
        .collect();
    entries.sort_by(crate::model::by_distance_then_id);
    entries.truncate(k);
    RankedList::from_sorted_unchecked(entries)
}

/// Greedy near-duplicate removal in ascending id order: an item is dropped
/// when its code is within Hamming distance `t` of an already kept item.
pub fn dedup(items: &[Item], thresholds: &[f32], t: u32) -> Result<Vec<Item>> {
    let mut order: Vec<&Item> = items.iter().collect();
    order.sort_by_key(|it| it.id);
    let codes = order
        .iter()
        .map(|it| binarize_slice(it.embedding.values(), thresholds))
        .collect::<Result<Vec<_>>>()?;
    let bits = thresholds.len();
    let bands: Vec<Range<usize>> = band_layout(bits, DEFAULT_BAND_WIDTH).collect();
    let mut kept: Vec<usize> = Vec::new();

    if (t as usize) < bands.len() {
        // Pigeonhole: codes within distance t < B agree exactly on at least
        // one of the B bands, so band collisions find every conflict.
        let mut table: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        let mut checked = Vec::new();
        for (i, code) in codes.iter().enumerate() {
            let keys: Vec<(usize, usize)> = bands
                .iter()
                .enumerate()
                .map(|(b, r)| (b, band_value(code.words(), r.start, r.len())))
                .collect();
            checked.clear();
            for key in &keys {
                if let Some(list) = table.get(key) {
                    checked.extend_from_slice(list);
                }
            }
            let dup = checked
                .iter()
                .any(|&j| hamming_words(code.words(), codes[j].words()) <= t);
            if !dup {
                for key in keys {
                    table.entry(key).or_default().push(i);
                }
                kept.push(i);
            }
        }
    } else {
        for (i, code) in codes.iter().enumerate() {
            if !kept
                .iter()
                .any(|&j| hamming_words(code.words(), codes[j].words()) <= t)
            {
                kept.push(i);
            }
        }
    }
    Ok(kept.into_iter().map(|i| order[i].clone()).collect())
}
