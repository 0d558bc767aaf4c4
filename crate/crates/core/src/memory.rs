//! Fixed-budget class-partitioned ring buffer and the replay batch
//! compositions drawn from it (class-balanced BER and the 50/50 ER split).
//!
//! The buffer is keyed by an opaque `key`: the class id for class-incremental
//! streams, the task id for permuted streams.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    /// Partition key in the buffer (class id, or task id for permuted streams).
    pub key: usize,
    /// Index of the sample in its source dataset, for dumps and fixtures.
    pub source: usize,
}

/// Position of a stored sample: `(key, offset within that key's queue)`.
pub type SlotRef = (usize, usize);

#[derive(Debug, Clone, Default)]
pub struct MemoryBuffer {
    capacity: usize,
    dim: Option<usize>,
    per_key: BTreeMap<usize, VecDeque<Sample>>,
    /// Keys in order of first arrival.
    seen: Vec<usize>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.per_key.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seen_keys(&self) -> &[usize] {
        &self.seen
    }

    /// Keys that currently hold at least one sample, ascending.
    pub fn keys(&self) -> Vec<usize> {
        self.per_key.iter().filter(|(_, q)| !q.is_empty()).map(|(&k, _)| k).collect()
    }

    pub fn count(&self, key: usize) -> usize {
        self.per_key.get(&key).map_or(0, VecDeque::len)
    }

    pub fn counts(&self) -> BTreeMap<usize, usize> {
        self.per_key.iter().map(|(&k, q)| (k, q.len())).collect()
    }

    pub fn queue(&self, key: usize) -> Option<&VecDeque<Sample>> {
        self.per_key.get(&key)
    }

    pub fn get(&self, slot: SlotRef) -> &Sample {
        &self.per_key[&slot.0][slot.1]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.per_key.values().flat_map(|q| q.iter())
    }

    /// Appends the batch to its key queues, then evicts the oldest sample of
    /// the largest queue (lowest key on ties) until the budget holds.
    pub fn update(&mut self, batch: Vec<Sample>) -> Result<()> {
        for s in &batch {
            match self.dim {
                Some(d) if d != s.x.len() => {
                    return Err(Error::Ingest(format!(
                        "sample of dimension {} offered to a buffer of dimension {d}",
                        s.x.len()
                    )))
                }
                _ => self.dim = Some(s.x.len()),
            }
        }
        for s in batch {
            if !self.seen.contains(&s.key) {
                self.seen.push(s.key);
            }
            self.per_key.entry(s.key).or_default().push_back(s);
        }
        while self.len() > self.capacity {
            let (&key, _) = self
                .per_key
                .iter()
                // max_by_key returns the last maximum; iterate in reverse to get the lowest key
                .rev()
                .max_by_key(|(_, q)| q.len())
                .expect("over budget implies non-empty");
            self.per_key.get_mut(&key).expect("key exists").pop_front();
        }
        Ok(())
    }

    pub fn gather(&self, slots: &[SlotRef]) -> Result<TrainBatch> {
        let dim = self.dim.unwrap_or(0);
        let mut data = Vec::with_capacity(slots.len() * dim);
        let mut labels = Vec::with_capacity(slots.len());
        let mut keys = Vec::with_capacity(slots.len());
        for &slot in slots {
            let s = self.get(slot);
            data.extend_from_slice(&s.x);
            labels.push(s.label);
            keys.push(s.key);
        }
        Ok(TrainBatch {
            x: Tensor2::new(slots.len(), dim, data)?,
            labels,
            keys,
            slots: slots.to_vec(),
        })
    }

    /// Every stored sample as one batch.
    pub fn all(&self) -> Result<TrainBatch> {
        let slots: Vec<SlotRef> = self
            .per_key
            .iter()
            .flat_map(|(&k, q)| (0..q.len()).map(move |i| (k, i)))
            .collect();
        self.gather(&slots)
    }

    /// `key → source indices`, oldest first.
    pub fn dump(&self) -> BufferDump {
        BufferDump {
            capacity: self.capacity,
            per_key: self
                .per_key
                .iter()
                .map(|(k, q)| (k.to_string(), q.iter().map(|s| s.source).collect()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferDump {
    pub capacity: usize,
    pub per_key: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x: Tensor2,
    pub labels: Vec<usize>,
    pub keys: Vec<usize>,
    pub slots: Vec<SlotRef>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Er,
    Ber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplaySpec {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub min_positive_pairs: usize,
    pub stream_load_size: usize,
}

impl ReplaySpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("training batch size must be >= 2, got {}", self.batch_size)));
        }
        if self.min_positive_pairs > 1 {
            return Err(Error::Config("min_positive_pairs must be 0 or 1".into()));
        }
        if self.stream_load_size == 0 {
            return Err(Error::Config("stream_load_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-key quotas produced by the class-selection step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSelection {
    pub n_c: usize,
    pub selected: Vec<usize>,
    pub remainder: Vec<usize>,
}

impl ClassSelection {
    pub fn quota(&self, key: usize) -> usize {
        if self.remainder.contains(&key) {
            self.n_c + 1
        } else {
            self.n_c
        }
    }
}

/// Class selection for BER over the non-empty keys `all`.
pub fn select_classes<R: Rng + ?Sized>(
    current: &[usize],
    all: &[usize],
    batch_size: usize,
    min_positive_pairs: usize,
    rng: &mut R,
) -> ClassSelection {
    let c = all.len().max(1);
    let n_c = batch_size / c;
    let r_c = batch_size % c;
    let current: Vec<usize> = current.iter().copied().filter(|k| all.contains(k)).collect();
    if batch_size > all.len() || min_positive_pairs == 0 || current.is_empty() {
        let remainder = all.choose_multiple(rng, r_c).copied().collect();
        return ClassSelection {
            n_c,
            selected: all.to_vec(),
            remainder,
        };
    }
    let mut current = current;
    if current.len() >= batch_size {
        current.shuffle(rng);
        current.truncate(batch_size.saturating_sub(1).max(1));
        current.sort_unstable();
    }
    let n_s = batch_size.saturating_sub(current.len());
    let others: Vec<usize> = all.iter().copied().filter(|k| !current.contains(k)).collect();
    let mut selected: Vec<usize> = others.choose_multiple(rng, n_s.saturating_sub(1)).copied().collect();
    selected.extend_from_slice(&current);
    let remainder = selected.choose_multiple(rng, 1).copied().collect();
    ClassSelection {
        n_c: 1,
        selected,
        remainder,
    }
}

/// Draws `want` distinct offsets from each `(key, want)` request; shortfalls
/// are redistributed round-robin over requested keys that still have unused
/// samples, then over `fallback` keys taken in random order.
fn draw_quotas<R: Rng + ?Sized>(
    buffer: &MemoryBuffer,
    requests: &[(usize, usize)],
    fallback: &[usize],
    rng: &mut R,
) -> Vec<SlotRef> {
    let shuffled = |k: usize, rng: &mut R| {
        let n = buffer.count(k);
        let mut offs: Vec<usize> = index::sample(rng, n, n).into_vec();
        offs.reverse();
        (k, offs)
    };
    let mut pools: Vec<(usize, Vec<usize>)> = requests.iter().map(|&(k, _)| shuffled(k, rng)).collect();
    let mut out = Vec::new();
    let mut deficit = 0;
    for (i, &(_, want)) in requests.iter().enumerate() {
        let (k, pool) = &mut pools[i];
        for _ in 0..want {
            match pool.pop() {
                Some(o) => out.push((*k, o)),
                None => deficit += 1,
            }
        }
    }
    let mut fallback = fallback.to_vec();
    while deficit > 0 {
        let mut progressed = false;
        for (k, pool) in pools.iter_mut() {
            if deficit == 0 {
                break;
            }
            if let Some(o) = pool.pop() {
                out.push((*k, o));
                deficit -= 1;
                progressed = true;
            }
        }
        if !progressed {
            if fallback.is_empty() {
                break;
            }
            let k = fallback.swap_remove(rng.gen_range(0..fallback.len()));
            pools.push(shuffled(k, rng));
        }
    }
    out
}

/// Balanced experience replay batch.
pub fn ber_select<R: Rng + ?Sized>(
    buffer: &MemoryBuffer,
    current: &[usize],
    batch_size: usize,
    min_positive_pairs: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    if buffer.is_empty() {
        return Err(Error::Bookkeeping("replay from an empty memory buffer".into()));
    }
    let keys = buffer.keys();
    let sel = select_classes(current, &keys, batch_size, min_positive_pairs, rng);
    let requests: Vec<(usize, usize)> = sel.selected.iter().map(|&k| (k, sel.quota(k))).collect();
    let rest: Vec<usize> = keys.iter().copied().filter(|k| !sel.selected.contains(k)).collect();
    let slots = draw_quotas(buffer, &requests, &rest, rng);
    buffer.gather(&slots)
}

/// Experience replay batch: `⌈B/2⌉` samples from the current task's keys,
/// `⌊B/2⌋` from everything else, uniformly over samples in each pool.
pub fn er_select<R: Rng + ?Sized>(
    buffer: &MemoryBuffer,
    current: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    if buffer.is_empty() {
        return Err(Error::Bookkeeping("replay from an empty memory buffer".into()));
    }
    let mut cur = Vec::new();
    let mut prev = Vec::new();
    for (&k, q) in &buffer.per_key {
        let pool = if current.contains(&k) { &mut cur } else { &mut prev };
        pool.extend((0..q.len()).map(|o| (k, o)));
    }
    let want_cur = if prev.is_empty() { batch_size } else { batch_size.div_ceil(2) };
    // a short pool hands its shortfall to the other one
    let take_cur = want_cur.min(cur.len());
    let take_prev = (batch_size - take_cur).min(prev.len());
    let take_cur = (batch_size - take_prev).min(cur.len());
    let mut slots: Vec<SlotRef> = cur.choose_multiple(rng, take_cur).copied().collect();
    slots.extend(prev.choose_multiple(rng, take_prev).copied());
    buffer.gather(&slots)
}

/// Uniform sample of up to `n` stored slots from keys outside `exclude`.
pub fn sample_uniform<R: Rng + ?Sized>(buffer: &MemoryBuffer, exclude: &[usize], n: usize, rng: &mut R) -> Vec<SlotRef> {
    let pool: Vec<SlotRef> = buffer
        .per_key
        .iter()
        .filter(|(k, _)| !exclude.contains(k))
        .flat_map(|(&k, q)| (0..q.len()).map(move |o| (k, o)))
        .collect();
    pool.choose_multiple(rng, n.min(pool.len())).copied().collect()
}

/// Replay batch according to `spec`.
pub fn select<R: Rng + ?Sized>(
    buffer: &MemoryBuffer,
    spec: &ReplaySpec,
    batch_keys: &[usize],
    task_keys: &[usize],
    rng: &mut R,
) -> Result<TrainBatch> {
    match spec.strategy {
        Strategy::Ber => ber_select(buffer, batch_keys, spec.batch_size, spec.min_positive_pairs, rng),
        Strategy::Er => er_select(buffer, task_keys, spec.batch_size, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(key: usize, source: usize) -> Sample {
        Sample {
            x: vec![source as f64],
            label: key,
            key,
            source,
        }
    }

    #[test]
    fn eviction_breaks_ties_on_lowest_key() {
        let mut m = MemoryBuffer::new(4);
        m.update(vec![s(0, 0), s(0, 1), s(1, 2), s(1, 3)]).unwrap();
        assert_eq!(m.counts().values().copied().collect::<Vec<_>>(), vec![2, 2]);
        m.update(vec![s(2, 4)]).unwrap();
        assert_eq!(m.counts().values().copied().collect::<Vec<_>>(), vec![1, 2, 1]);
        assert_eq!(m.queue(0).unwrap()[0].source, 1);
    }

    #[test]
    fn dimension_mismatch_is_ingest_error() {
        let mut m = MemoryBuffer::new(4);
        m.update(vec![s(0, 0)]).unwrap();
        let bad = Sample {
            x: vec![1.0, 2.0],
            ..s(0, 1)
        };
        assert!(matches!(m.update(vec![bad]), Err(Error::Ingest(_))));
    }

    #[test]
    fn selection_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sel = select_classes(&[3], &[0, 1, 2, 3], 10, 1, &mut rng);
        assert_eq!((sel.n_c, sel.remainder.len()), (2, 2));
        let total: usize = sel.selected.iter().map(|&k| sel.quota(k)).sum();
        assert_eq!(total, 10);
        let sel = select_classes(&[9], &(0..10).collect::<Vec<_>>(), 10, 1, &mut rng);
        assert_eq!((sel.n_c, sel.remainder.len()), (1, 1));
        let sel = select_classes(&[9], &(0..10).collect::<Vec<_>>(), 10, 0, &mut rng);
        assert_eq!((sel.n_c, sel.remainder.len(), sel.selected.len()), (1, 0, 10));
    }

    #[test]
    fn positive_pair_branch() {
        let mut m = MemoryBuffer::new(60);
        for k in 0..6 {
            m.update((0..5).map(|i| s(k, k * 10 + i)).collect()).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let b = ber_select(&m, &[5], 4, 1, &mut rng).unwrap();
            assert_eq!(b.len(), 4);
            assert!(b.keys.contains(&5));
            let mut distinct = b.keys.clone();
            distinct.sort_unstable();
            distinct.dedup();
            assert_eq!(distinct.len(), 3);
        }
    }

    #[test]
    fn er_composition() {
        let mut m = MemoryBuffer::new(100);
        m.update((0..20).map(|i| s(i % 2, i)).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = er_select(&m, &[0, 1], 10, &mut rng).unwrap();
        assert_eq!(b.len(), 10);
        m.update((0..20).map(|i| s(2 + i % 2, 100 + i)).collect()).unwrap();
        let b = er_select(&m, &[2, 3], 10, &mut rng).unwrap();
        assert_eq!(b.keys.iter().filter(|&&k| k >= 2).count(), 5);
    }

    #[test]
    fn empty_buffer_errors() {
        let m = MemoryBuffer::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(ber_select(&m, &[0], 4, 1, &mut rng).is_err());
        assert!(er_select(&m, &[0], 4, &mut rng).is_err());
    }
}
