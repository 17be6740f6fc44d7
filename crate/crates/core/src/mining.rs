//! Click-log triplet mining.
//!
//! Clicked results are candidate positives and non-clicked results are
//! candidate hard negatives. Both are filtered by a fused multi-channel
//! distance before a mini-batch shares every sampled negative across all of
//! its queries.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{l2_distance, Embedding};

/// One query's returned list and the subset the user clicked.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickLogRecord {
    pub query_id: u64,
    /// One query vector per feature channel, in channel order.
    pub query_features: Vec<Embedding>,
    pub returned: Vec<u64>,
    pub clicked: Vec<u64>,
}

impl ClickLogRecord {
    pub fn validate(&self) -> Result<()> {
        if self.returned.is_empty() {
            return Err(Error::InvalidValue(format!(
                "record {}: returned list is empty",
                self.query_id
            )));
        }
        let returned: BTreeSet<u64> = self.returned.iter().copied().collect();
        if let Some(c) = self.clicked.iter().find(|c| !returned.contains(c)) {
            return Err(Error::InvalidValue(format!(
                "record {}: clicked item {c} was not returned",
                self.query_id
            )));
        }
        Ok(())
    }

    /// Returned items that were not clicked, ascending.
    pub fn nonclicked(&self) -> BTreeSet<u64> {
        let clicked: BTreeSet<u64> = self.clicked.iter().copied().collect();
        self.returned
            .iter()
            .copied()
            .filter(|id| !clicked.contains(id))
            .collect()
    }
}

/// Wire form of a click-log record. `query_vec` holds one vector per channel;
/// a single flat vector is accepted for one-channel logs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClickLogLine {
    pub query_id: u64,
    pub query_vec: QueryVectors,
    pub returned: Vec<u64>,
    pub clicked: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QueryVectors {
    PerChannel(Vec<Vec<f32>>),
    Single(Vec<f32>),
}

impl TryFrom<ClickLogLine> for ClickLogRecord {
    type Error = Error;

    fn try_from(line: ClickLogLine) -> Result<Self> {
        let vectors = match line.query_vec {
            QueryVectors::PerChannel(v) => v,
            QueryVectors::Single(v) => vec![v],
        };
        let record = ClickLogRecord {
            query_id: line.query_id,
            query_features: vectors
                .into_iter()
                .map(Embedding::new)
                .collect::<Result<_>>()?,
            returned: line.returned,
            clicked: line.clicked,
        };
        record.validate()?;
        Ok(record)
    }
}

impl From<&ClickLogRecord> for ClickLogLine {
    fn from(r: &ClickLogRecord) -> Self {
        ClickLogLine {
            query_id: r.query_id,
            query_vec: QueryVectors::PerChannel(
                r.query_features.iter().map(|e| e.values().to_vec()).collect(),
            ),
            returned: r.returned.clone(),
            clicked: r.clicked.clone(),
        }
    }
}

/// Named embedding spaces, each covering every minable item.
#[derive(Clone, Debug, Default)]
pub struct FeatureChannels {
    names: Vec<String>,
    stores: Vec<HashMap<u64, Embedding>>,
}

impl FeatureChannels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_channel(&mut self, name: impl Into<String>, vectors: HashMap<u64, Embedding>) {
        self.names.push(name.into());
        self.stores.push(vectors);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Vectors of channel `i`, keyed by item id.
    pub fn channel(&self, i: usize) -> &HashMap<u64, Embedding> {
        &self.stores[i]
    }

    fn vector(&self, channel: usize, id: u64) -> Result<&Embedding> {
        self.stores[channel].get(&id).ok_or_else(|| {
            Error::MissingFeature(format!("item {id} missing from channel '{}'", self.names[channel]))
        })
    }

    fn item_features(&self, id: u64) -> Result<Vec<&Embedding>> {
        (0..self.len()).map(|c| self.vector(c, id)).collect()
    }
}

/// Mean of per-channel L2 distances between two feature sets.
fn mean_channel_distance(a: &[&Embedding], b: &[&Embedding]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::dim(a.len(), b.len()));
    }
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        sum += l2_distance(x, y)?;
    }
    Ok(sum / a.len() as f64)
}

/// Fused distance between two items across every channel.
pub fn fused_distance(a: u64, b: u64, channels: &FeatureChannels) -> Result<f64> {
    mean_channel_distance(&channels.item_features(a)?, &channels.item_features(b)?)
}

/// Fused distance between a record's query and an item.
pub fn query_distance(record: &ClickLogRecord, item: u64, channels: &FeatureChannels) -> Result<f64> {
    if record.query_features.len() != channels.len() {
        return Err(Error::MissingFeature(format!(
            "query {} has {} channel vectors, expected {}",
            record.query_id,
            record.query_features.len(),
            channels.len()
        )));
    }
    let q: Vec<&Embedding> = record.query_features.iter().collect();
    mean_channel_distance(&q, &channels.item_features(item)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Minimum distance a negative keeps from the query and from every click.
    pub gamma: f64,
    /// Maximum query distance for a clicked item to count as a positive.
    pub epsilon: f64,
    /// Records per mini-batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            gamma: 0.4,
            epsilon: 0.4,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidParam("gamma and epsilon must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Non-clicked items at least `gamma` from both the query and the nearest click.
pub fn filter_negatives(
    record: &ClickLogRecord,
    channels: &FeatureChannels,
    cfg: &MiningConfig,
) -> Result<BTreeSet<u64>> {
    let mut kept = BTreeSet::new();
    for d in record.nonclicked() {
        let mut nearest = query_distance(record, d, channels)?;
        for &c in &record.clicked {
            nearest = nearest.min(fused_distance(d, c, channels)?);
        }
        if nearest >= cfg.gamma {
            kept.insert(d);
        }
    }
    Ok(kept)
}

/// Clicked items within `epsilon` of the query.
pub fn filter_positives(
    record: &ClickLogRecord,
    channels: &FeatureChannels,
    cfg: &MiningConfig,
) -> Result<BTreeSet<u64>> {
    let mut kept = BTreeSet::new();
    for &d in &record.clicked {
        if query_distance(record, d, channels)? <= cfg.epsilon {
            kept.insert(d);
        }
    }
    Ok(kept)
}

/// A training triplet: query, positive item, negative item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub q: u64,
    pub pos: u64,
    pub neg: u64,
}

/// Counters describing one mining run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    pub records: usize,
    pub batches: usize,
    pub empty_batches: usize,
    pub skipped_no_positive: usize,
    pub skipped_no_negative: usize,
    pub clicked_total: usize,
    pub positives_kept: usize,
    pub nonclicked_total: usize,
    pub negatives_kept: usize,
    pub triplets: usize,
    pub collisions_dropped: usize,
    pub positive_survival_rate: f64,
    pub negative_survival_rate: f64,
}

impl MiningStats {
    fn is_empty_batch(&self) -> bool {
        self.records == self.skipped_no_positive + self.skipped_no_negative
    }

    fn absorb(&mut self, other: &MiningStats) {
        self.records += other.records;
        self.skipped_no_positive += other.skipped_no_positive;
        self.skipped_no_negative += other.skipped_no_negative;
        self.clicked_total += other.clicked_total;
        self.positives_kept += other.positives_kept;
        self.nonclicked_total += other.nonclicked_total;
        self.negatives_kept += other.negatives_kept;
        self.triplets += other.triplets;
        self.collisions_dropped += other.collisions_dropped;
        self.finish_rates();
    }

    fn finish_rates(&mut self) {
        let rate = |kept: usize, total: usize| if total == 0 { 0.0 } else { kept as f64 / total as f64 };
        self.positive_survival_rate = rate(self.positives_kept, self.clicked_total);
        self.negative_survival_rate = rate(self.negatives_kept, self.nonclicked_total);
    }
}

/// Triplets from one mini-batch plus its statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchTriplets {
    pub triplets: Vec<Triplet>,
    pub stats: MiningStats,
}

/// Samples one `(q, q+)` pair and one negative per record, then pairs every
/// query with every sampled negative. Triplets whose shared negative is the
/// query's own positive are dropped.
pub fn build_batch_triplets(
    records: &[ClickLogRecord],
    channels: &FeatureChannels,
    cfg: &MiningConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BatchTriplets> {
    cfg.validate()?;
    let batch = mine_batch(records, channels, cfg, rng)?;
    if batch.stats.is_empty_batch() {
        return Err(Error::EmptyBatch);
    }
    Ok(batch)
}

fn mine_batch(
    records: &[ClickLogRecord],
    channels: &FeatureChannels,
    cfg: &MiningConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BatchTriplets> {
    let mut stats = MiningStats {
        records: records.len(),
        batches: 1,
        ..MiningStats::default()
    };
    let mut sampled: Vec<(u64, u64, u64)> = Vec::with_capacity(records.len());
    for record in records {
        record.validate()?;
        let positives = filter_positives(record, channels, cfg)?;
        let negatives = filter_negatives(record, channels, cfg)?;
        stats.clicked_total += record.clicked.iter().collect::<BTreeSet<_>>().len();
        stats.positives_kept += positives.len();
        stats.nonclicked_total += record.nonclicked().len();
        stats.negatives_kept += negatives.len();
        if positives.is_empty() {
            stats.skipped_no_positive += 1;
            continue;
        }
        if negatives.is_empty() {
            stats.skipped_no_negative += 1;
            continue;
        }
        let pos = pick(&positives, rng);
        let neg = pick(&negatives, rng);
        sampled.push((record.query_id, pos, neg));
    }

    let mut triplets = Vec::with_capacity(sampled.len() * sampled.len());
    for &(q, pos, _) in &sampled {
        for &(_, _, neg) in &sampled {
            if neg == pos {
                stats.collisions_dropped += 1;
            } else {
                triplets.push(Triplet { q, pos, neg });
            }
        }
    }
    stats.triplets = triplets.len();
    stats.finish_rates();
    Ok(BatchTriplets { triplets, stats })
}

fn pick(set: &BTreeSet<u64>, rng: &mut ChaCha8Rng) -> u64 {
    let i = rng.gen_range(0..set.len());
    *set.iter().nth(i).expect("index within set")
}

/// Mines every record in consecutive batches of `cfg.batch_size` from a
/// single RNG stream seeded with `cfg.seed`.
///
/// Batches whose records all fail filtering are counted and skipped.
pub fn mine(
    records: &[ClickLogRecord],
    channels: &FeatureChannels,
    cfg: &MiningConfig,
) -> Result<BatchTriplets> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = BatchTriplets::default();
    for chunk in records.chunks(cfg.batch_size) {
        let batch = mine_batch(chunk, channels, cfg, &mut rng)?;
        out.stats.batches += 1;
        if batch.stats.is_empty_batch() {
            out.stats.empty_batches += 1;
        }
        out.triplets.extend(batch.triplets);
        out.stats.absorb(&batch.stats);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Items on a 2-d unit circle so distances are easy to reason about.
    fn circle_channels(angles: &[(u64, f32)]) -> FeatureChannels {
        let mut store = HashMap::new();
        for &(id, a) in angles {
            store.insert(id, Embedding::new(vec![a.cos(), a.sin()]).unwrap());
        }
        let mut ch = FeatureChannels::new();
        ch.add_channel("local", store);
        ch
    }

    fn on_circle(a: f32) -> Embedding {
        Embedding::new(vec![a.cos(), a.sin()]).unwrap()
    }

    fn chord(a: f32) -> f32 {
        2.0 * (a / 2.0).sin()
    }

    /// Angle whose chord length equals `d`.
    fn angle_for(d: f32) -> f32 {
        2.0 * (d / 2.0).asin()
    }

    #[test]
    fn fused_distance_single_and_multi_channel() {
        let ch = circle_channels(&[(1, 0.0), (2, 1.0)]);
        assert_eq!(fused_distance(1, 1, &ch).unwrap(), 0.0);
        let plain = l2_distance(&on_circle(0.0), &on_circle(1.0)).unwrap();
        assert_eq!(fused_distance(1, 2, &ch).unwrap(), plain);

        let mut multi = FeatureChannels::new();
        for (name, d) in [("local", 0.3f32), ("previous", 0.6), ("pretrained", 0.9)] {
            let mut store = HashMap::new();
            store.insert(1, on_circle(0.0));
            store.insert(2, on_circle(angle_for(d)));
            multi.add_channel(name, store);
        }
        assert!((fused_distance(1, 2, &multi).unwrap() - 0.6).abs() < 1e-6);
        assert!(matches!(fused_distance(1, 3, &multi), Err(Error::MissingFeature(_))));
    }

    #[test]
    fn negative_rule_examples() {
        let cfg = MiningConfig { gamma: 0.3, ..MiningConfig::default() };
        // click at angle 0 (distance from query irrelevant here), query placed so that
        // dist(d, q) = 0.5 and dist(d, click) = 0.4
        let d_angle = 0.0f32;
        let click_angle = angle_for(0.4);
        let q_angle = -angle_for(0.5);
        let ch = circle_channels(&[(10, d_angle), (20, click_angle)]);
        let record = ClickLogRecord {
            query_id: 1,
            query_features: vec![on_circle(q_angle)],
            returned: vec![10, 20],
            clicked: vec![20],
        };
        assert!((chord(click_angle) - 0.4).abs() < 1e-6);
        assert_eq!(filter_negatives(&record, &ch, &cfg).unwrap(), BTreeSet::from([10]));

        let near_click = circle_channels(&[(10, d_angle), (20, angle_for(0.1))]);
        assert!(filter_negatives(&record, &near_click, &cfg).unwrap().is_empty());
    }

    #[test]
    fn positive_rule_examples() {
        let ch = circle_channels(&[(1, angle_for(0.2)), (2, angle_for(0.5))]);
        let record = ClickLogRecord {
            query_id: 9,
            query_features: vec![on_circle(0.0)],
            returned: vec![1, 2, 3],
            clicked: vec![1, 2],
        };
        let cfg = MiningConfig { epsilon: 0.4, ..MiningConfig::default() };
        assert_eq!(filter_positives(&record, &ch, &cfg).unwrap(), BTreeSet::from([1]));
        let loose = MiningConfig { epsilon: 2.0, ..cfg };
        assert_eq!(filter_positives(&record, &ch, &loose).unwrap(), BTreeSet::from([1, 2]));
    }

    #[test]
    fn invalid_records_rejected() {
        let r = ClickLogRecord { query_id: 1, query_features: vec![], returned: vec![], clicked: vec![] };
        assert!(r.validate().is_err());
        let r = ClickLogRecord { query_id: 1, query_features: vec![], returned: vec![1], clicked: vec![2] };
        assert!(r.validate().is_err());
    }

    fn simple_record(q: u64, q_angle: f32, pos: u64, neg: u64) -> ClickLogRecord {
        ClickLogRecord {
            query_id: q,
            query_features: vec![on_circle(q_angle)],
            returned: vec![pos, neg],
            clicked: vec![pos],
        }
    }

    #[test]
    fn batch_of_four_yields_sixteen() {
        // positives sit on the query, negatives on the far side of the circle
        let mut angles = Vec::new();
        let mut records = Vec::new();
        for i in 0..4u64 {
            let a = i as f32 * 0.05;
            angles.push((100 + i, a));
            angles.push((200 + i, a + 3.0));
            records.push(simple_record(i, a, 100 + i, 200 + i));
        }
        let ch = circle_channels(&angles);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = build_batch_triplets(&records, &ch, &MiningConfig::default(), &mut rng).unwrap();
        assert_eq!(out.triplets.len(), 16);
        assert_eq!(out.stats.collisions_dropped, 0);

        let out = build_batch_triplets(&records[..1], &ch, &MiningConfig::default(), &mut rng).unwrap();
        assert_eq!(out.triplets, vec![Triplet { q: 0, pos: 100, neg: 200 }]);
    }

    #[test]
    fn shared_negative_equal_to_positive_is_dropped() {
        // record 1's only negative (item 100) is record 0's positive
        let ch = circle_channels(&[(100, 0.0), (200, 3.0), (300, 3.0)]);
        let r0 = simple_record(0, 0.0, 100, 200);
        let r1 = ClickLogRecord {
            query_id: 1,
            query_features: vec![on_circle(3.0)],
            returned: vec![300, 100],
            clicked: vec![300],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = build_batch_triplets(&[r0, r1], &ch, &MiningConfig::default(), &mut rng).unwrap();
        // enumeration: (0,100,200) (0,100,100)x (1,300,200) (1,300,100)
        assert_eq!(out.stats.collisions_dropped, 1);
        assert_eq!(
            out.triplets,
            vec![
                Triplet { q: 0, pos: 100, neg: 200 },
                Triplet { q: 1, pos: 300, neg: 200 },
                Triplet { q: 1, pos: 300, neg: 100 },
            ]
        );
    }

    #[test]
    fn empty_batch_error_and_skips() {
        let ch = circle_channels(&[(1, 0.0), (2, 0.01)]);
        // positive survives but the only negative hugs the click
        let r = simple_record(0, 0.0, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_batch_triplets(&[r.clone()], &ch, &MiningConfig::default(), &mut rng),
            Err(Error::EmptyBatch)
        ));
        let mined = mine(&[r], &ch, &MiningConfig::default()).unwrap();
        assert!(mined.triplets.is_empty());
        assert_eq!(mined.stats.empty_batches, 1);
        assert_eq!(mined.stats.skipped_no_negative, 1);
    }

    #[test]
    fn click_line_accepts_flat_vector() {
        let line: ClickLogLine = serde_json::from_str(
            r#"{"query_id":3,"query_vec":[1.0,0.0],"returned":[1,2],"clicked":[2]}"#,
        )
        .unwrap();
        let rec = ClickLogRecord::try_from(line).unwrap();
        assert_eq!(rec.query_features.len(), 1);
        let bad: ClickLogLine = serde_json::from_str(
            r#"{"query_id":3,"query_vec":[[1.0,0.0]],"returned":[1],"clicked":[2]}"#,
        )
        .unwrap();
        assert!(ClickLogRecord::try_from(bad).is_err());
    }
}
