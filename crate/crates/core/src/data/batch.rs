//! Length-bucketed batches over one or more corpus parts.
//!
//! Batch composition depends only on item lengths, part weights, the token
//! budget and the seed, so two model families fed the same lengths see
//! identical batch streams.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::derive_seed;
use crate::error::{Error, Result};

/// An example inside a multi-part corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemRef {
    pub part: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<ItemRef>,
    /// Longest item length, so `items.len() * max_len <= max_tokens`.
    pub max_len: usize,
}

/// Item lengths of one corpus part and its upsampling weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub lengths: Vec<usize>,
    pub weight: f64,
}

/// Deterministic, endless stream of batches, generated one epoch at a time.
#[derive(Clone, Debug)]
pub struct BatchStream {
    parts: Vec<Part>,
    max_tokens: usize,
    seed: u64,
    epoch: usize,
    queue: std::collections::VecDeque<Batch>,
    delivered: usize,
}

impl BatchStream {
    pub fn new(parts: Vec<Part>, max_tokens: usize, seed: u64) -> Result<Self> {
        if parts.is_empty() || parts.iter().all(|p| p.lengths.is_empty()) {
            return Err(Error::config("no training examples"));
        }
        if parts.iter().any(|p| !(p.weight.is_finite() && p.weight >= 0.0)) {
            return Err(Error::config("part weights must be finite and nonnegative"));
        }
        if max_tokens == 0 {
            return Err(Error::config("max_tokens must be positive"));
        }
        let s = Self {
            parts,
            max_tokens,
            seed,
            epoch: 0,
            queue: Default::default(),
            delivered: 0,
        };
        if s.parts.iter().all(|p| p.lengths.iter().all(|&l| l > max_tokens)) {
            return Err(Error::config(format!("every example is longer than max_tokens {max_tokens}")));
        }
        Ok(s)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Number of batches handed out so far.
    pub fn delivered(&self) -> usize {
        self.delivered
    }

    /// Skips `n` batches, as a resumed run must.
    pub fn skip(&mut self, n: usize) {
        for _ in 0..n {
            self.next_batch();
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        while self.queue.is_empty() {
            let items = sample_epoch(&self.parts, self.seed, self.epoch);
            self.queue.extend(make_batches(&self.parts, &items, self.max_tokens, derive_seed(self.seed, &format!("order/{}", self.epoch))));
            self.epoch += 1;
        }
        self.delivered += 1;
        self.queue.pop_front().expect("queue refilled")
    }
}

/// One epoch's worth of items. A single part is a permutation of its items;
/// several parts fill `Σ size` slots, each drawn from part `i` with probability
/// ∝ `weight_i · size_i` and cycling through a shuffled order within the part.
pub fn sample_epoch(parts: &[Part], seed: u64, epoch: usize) -> Vec<ItemRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch/{epoch}")));
    let orders: Vec<Vec<usize>> = parts
        .iter()
        .map(|p| {
            let mut o: Vec<usize> = (0..p.lengths.len()).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    if parts.len() == 1 {
        return orders[0].iter().map(|&index| ItemRef { part: 0, index }).collect();
    }
    let weights: Vec<f64> = parts.iter().map(|p| p.weight * p.lengths.len() as f64).collect();
    let Ok(dist) = WeightedIndex::new(&weights) else {
        return Vec::new();
    };
    let total: usize = parts.iter().map(|p| p.lengths.len()).sum();
    let mut cursor = vec![0usize; parts.len()];
    (0..total)
        .map(|_| {
            let part = dist.sample(&mut rng);
            let order = &orders[part];
            let index = order[cursor[part] % order.len()];
            cursor[part] += 1;
            ItemRef { part, index }
        })
        .collect()
}

/// Buckets `items` by length into batches of at most `max_tokens` padded
/// tokens, then shuffles batch order. Over-long items are skipped with a warning.
pub fn make_batches(parts: &[Part], items: &[ItemRef], max_tokens: usize, seed: u64) -> Vec<Batch> {
    let len = |r: &ItemRef| parts[r.part].lengths[r.index];
    let mut sorted: Vec<ItemRef> = Vec::with_capacity(items.len());
    for r in items {
        if len(r) > max_tokens {
            log::warn!(
                "skipping example {} of part {}: length {} exceeds max_tokens {max_tokens}",
                r.index,
                r.part,
                len(r)
            );
        } else {
            sorted.push(*r);
        }
    }
    sorted.sort_by_key(len);
    let mut batches = Vec::new();
    let mut cur: Vec<ItemRef> = Vec::new();
    let mut cur_max = 0;
    for r in sorted {
        let l = len(&r);
        let new_max = cur_max.max(l);
        if !cur.is_empty() && (cur.len() + 1) * new_max > max_tokens {
            batches.push(Batch {
                items: std::mem::take(&mut cur),
                max_len: cur_max,
            });
            cur_max = 0;
        }
        cur_max = cur_max.max(l);
        cur.push(r);
    }
    if !cur.is_empty() {
        batches.push(Batch {
            items: cur,
            max_len: cur_max,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batches.shuffle(&mut rng);
    batches
}
