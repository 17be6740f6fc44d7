//! Shared domain types and distance primitives.
//!
//! Embeddings are stored as `f32` and every distance is accumulated in `f64`.
//! Binary codes pack one bit per embedding dimension into 64-bit words, bit
//! `i` of the code living at bit `i % 64` of word `i / 64`.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of top-level categories a query can be assigned to.
pub const NUM_CATEGORIES: usize = 14;

/// Default embedding dimension.
pub const DEFAULT_DIM: usize = 512;

const NORM_TOLERANCE: f64 = 1e-6;

/// A dense feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f32>,
    normalized: bool,
}

impl Embedding {
    /// Wraps raw values, rejecting NaN and infinities.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        check_finite(&values)?;
        let normalized = (norm(&values) - 1.0).abs() <= NORM_TOLERANCE;
        Ok(Self { values, normalized })
    }

    /// Scales `values` to unit L2 norm.
    pub fn normalized(mut values: Vec<f32>) -> Result<Self> {
        check_finite(&values)?;
        let n = norm(&values);
        if n == 0.0 {
            return Err(Error::InvalidValue("cannot normalize a zero vector".into()));
        }
        for v in &mut values {
            *v = (f64::from(*v) / n) as f32;
        }
        Ok(Self {
            normalized: (norm(&values) - 1.0).abs() <= NORM_TOLERANCE,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidValue(format!("non-finite value at index {i}"))),
        None => Ok(()),
    }
}

fn norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Euclidean distance between two embeddings.
pub fn l2_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim(a.dim(), b.dim()));
    }
    Ok(squared_l2(&a.values, &b.values).sqrt())
}

/// Squared Euclidean distance over raw slices of equal length.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// A packed bit string of fixed length.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryCode {
    words: Vec<u64>,
    len: usize,
}

impl BinaryCode {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; words_for(len)],
            len,
        }
    }

    /// Builds a code from packed words; pad bits past `len` must be zero.
    pub fn from_words(words: Vec<u64>, len: usize) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(Error::dim(words_for(len), words.len()));
        }
        let rem = len % 64;
        if rem != 0 && words[words.len() - 1] >> rem != 0 {
            return Err(Error::InvalidValue("non-zero pad bits".into()));
        }
        Ok(Self { words, len })
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut code = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            code.set(i, b);
        }
        code
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, bit: bool) {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        let mask = 1u64 << (i % 64);
        if bit {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }
}

/// Number of 64-bit words needed to hold `bits` bits.
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Number of differing bits between two codes of the same length.
pub fn hamming(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    if a.len != b.len {
        return Err(Error::dim(a.len, b.len));
    }
    Ok(hamming_words(&a.words, &b.words))
}

#[inline]
pub fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Sets bit `i` iff `values[i] > thresholds[i]`.
pub fn binarize(e: &Embedding, thresholds: &[f32]) -> Result<BinaryCode> {
    binarize_slice(e.values(), thresholds)
}

pub fn binarize_slice(values: &[f32], thresholds: &[f32]) -> Result<BinaryCode> {
    if values.len() != thresholds.len() {
        return Err(Error::dim(thresholds.len(), values.len()));
    }
    check_finite(values)?;
    check_finite(thresholds)?;
    let mut words = vec![0u64; words_for(values.len())];
    for (i, (&v, &t)) in values.iter().zip(thresholds).enumerate() {
        if v > t {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    Ok(BinaryCode {
        words,
        len: values.len(),
    })
}

/// Per-dimension medians of a batch of vectors. For an even batch the median
/// is the midpoint of the two central values.
pub fn median_thresholds<'a, I>(vectors: I, dim: usize) -> Result<Vec<f32>>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let rows: Vec<&[f32]> = vectors.into_iter().collect();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::dim(dim, bad.len()));
    }
    if rows.is_empty() {
        return Ok(vec![0.0; dim]);
    }
    let n = rows.len();
    let mut column = vec![0f32; n];
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        for (slot, row) in column.iter_mut().zip(&rows) {
            *slot = row[j];
        }
        let mid = n / 2;
        let (_, upper, _) = column.select_nth_unstable_by(mid, f32::total_cmp);
        let upper = *upper;
        let median = if n % 2 == 1 {
            upper
        } else {
            let lower = column[..mid]
                .iter()
                .copied()
                .max_by(f32::total_cmp)
                .expect("non-empty lower half");
            ((f64::from(lower) + f64::from(upper)) / 2.0) as f32
        };
        out.push(median);
    }
    Ok(out)
}

/// How float embeddings are turned into binary codes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinarizationRule {
    /// Per-dimension medians of the indexed inventory.
    #[default]
    Median,
    /// Threshold every dimension at zero.
    Sign,
}

/// A category label in `[0, NUM_CATEGORIES)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Category(u8);

impl Category {
    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_CATEGORIES {
            Ok(Self(index as u8))
        } else {
            Err(Error::InvalidValue(format!(
                "category {index} outside [0, {NUM_CATEGORIES})"
            )))
        }
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn all() -> impl Iterator<Item = Category> {
        (0..NUM_CATEGORIES as u8).map(Category)
    }
}

impl TryFrom<u8> for Category {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Category::new(usize::from(v))
    }
}

impl From<Category> for u8 {
    fn from(c: Category) -> u8 {
        c.0
    }
}

/// Commercial metadata used by quality re-ranking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityMeta {
    pub sales_volume: u64,
    pub percent_conversion: f32,
    pub applause_rate: f32,
}

impl QualityMeta {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("percent_conversion", self.percent_conversion),
            ("applause_rate", self.applause_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidValue(format!("{name} = {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// The indexed unit. The binary code is derived at index build time.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: u64,
    pub category: Category,
    pub embedding: Embedding,
    pub quality: QualityMeta,
}

/// One ranked hit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: u64,
    pub distance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl RankedEntry {
    pub fn new(id: u64, distance: f64) -> Self {
        Self {
            id,
            distance,
            score: None,
        }
    }
}

/// Total order used for every ranked list: ascending distance, then id.
pub fn by_distance_then_id(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| a.id.cmp(&b.id))
}

/// Descending score, then ascending id; unscored entries sort last.
pub fn by_score_then_id(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    let key = |e: &RankedEntry| e.score.unwrap_or(f64::NEG_INFINITY);
    key(b).total_cmp(&key(a)).then_with(|| a.id.cmp(&b.id))
}

/// Ranked hits with unique ids.
///
/// Plain lists are sorted ascending by `(distance, id)`. Re-ranked lists,
/// where every entry carries a score, are sorted by descending score, ties
/// ascending by id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sorts and validates arbitrary entries.
    pub fn from_unsorted(mut entries: Vec<RankedEntry>) -> Result<Self> {
        entries.sort_by(by_distance_then_id);
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.id) {
                return Err(Error::InvalidValue(format!("duplicate id {} in ranked list", e.id)));
            }
        }
        Ok(Self { entries })
    }

    /// Orders fully scored entries by descending score, then id.
    pub fn from_scored(mut entries: Vec<RankedEntry>) -> Result<Self> {
        if entries.iter().any(|e| !e.score.is_some_and(f64::is_finite)) {
            return Err(Error::InvalidValue("every re-ranked entry needs a finite score".into()));
        }
        entries.sort_by(by_score_then_id);
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.id) {
                return Err(Error::InvalidValue(format!("duplicate id {} in ranked list", e.id)));
            }
        }
        Ok(Self { entries })
    }

    /// Wraps entries the caller already holds in ranked order.
    pub(crate) fn from_sorted_unchecked(entries: Vec<RankedEntry>) -> Self {
        debug_assert!(entries
            .windows(2)
            .all(|w| by_distance_then_id(&w[0], &w[1]) == Ordering::Less));
        Self { entries }
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<RankedEntry> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }

    /// Little-endian byte encoding: count, then `(id, distance bits, score flag, score bits)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.entries.len() * 25);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.id.to_le_bytes());
            out.extend_from_slice(&e.distance.to_bits().to_le_bytes());
            match e.score {
                Some(s) => {
                    out.push(1);
                    out.extend_from_slice(&s.to_bits().to_le_bytes());
                }
                None => out.push(0),
            }
        }
        out
    }
}
