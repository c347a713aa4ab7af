use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::sample::Sample;

pub const DEFAULT_BUFFER_CAPACITY: usize = 10_000;

/// Bounded FIFO store of uploaded samples. Eviction is strictly
/// oldest-first.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    store: VecDeque<Sample>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            store: VecDeque::with_capacity(capacity.min(DEFAULT_BUFFER_CAPACITY)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.store.iter()
    }

    /// Appends in arrival order, then evicts from the front down to capacity.
    pub fn ingest<I: IntoIterator<Item = Sample>>(&mut self, batch: I) {
        for s in batch {
            self.store.push_back(s);
            if self.store.len() > self.capacity {
                self.store.pop_front();
            }
        }
    }

    /// Draws `k` samples uniformly: without replacement when the buffer holds
    /// at least `k`, with replacement otherwise. An empty buffer yields none.
    pub fn draw<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<&Sample> {
        let n = self.store.len();
        if n == 0 || k == 0 {
            return Vec::new();
        }
        if n >= k {
            index::sample(rng, n, k)
                .into_iter()
                .map(|i| &self.store[i])
                .collect()
        } else {
            (0..k)
                .map(|_| &self.store[rng.random_range(0..n)])
                .collect()
        }
    }
}
