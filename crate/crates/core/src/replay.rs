//! Fixed-capacity reservoir-sampled replay store.

use crate::error::{Result, SpclError};
use crate::rng::DetRng;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayItem {
    pub features: Vec<f64>,
    pub label: u32,
    pub task_id: usize,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<ReplayItem>,
    seen_count: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, items: Vec::new(), seen_count: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen_count(&self) -> usize {
        self.seen_count
    }

    pub fn items(&self) -> &[ReplayItem] {
        &self.items
    }

    /// Reinstate a buffer from checkpointed parts.
    pub fn restore(&mut self, items: Vec<ReplayItem>, seen_count: usize) {
        assert!(items.len() <= self.capacity, "restored items exceed capacity");
        assert_eq!(items.len(), seen_count.min(self.capacity), "size invariant");
        self.items = items;
        self.seen_count = seen_count;
    }

    /// Algorithm R: keep the first `capacity` items, then replace a uniform
    /// slot with probability capacity / (seen_count + 1).
    pub fn reservoir_insert(&mut self, item: ReplayItem, rng: &mut DetRng) {
        if self.capacity == 0 {
            self.seen_count += 1;
            return;
        }
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let j = rng.random_range(0..self.seen_count + 1);
            if j < self.capacity {
                self.items[j] = item;
            }
        }
        self.seen_count += 1;
    }

    /// Uniform sample of `n` items: without replacement when the buffer is
    /// large enough, with replacement otherwise.
    pub fn sample_batch(&self, n: usize, rng: &mut DetRng) -> Result<Vec<ReplayItem>> {
        if self.items.is_empty() {
            return Err(SpclError::EmptyBuffer);
        }
        if n > self.items.len() {
            return Ok((0..n)
                .map(|_| self.items[rng.random_range(0..self.items.len())].clone())
                .collect());
        }
        let mut indices: Vec<usize> = (0..self.items.len()).collect();
        for i in 0..n {
            let j = rng.random_range(i..indices.len());
            indices.swap(i, j);
        }
        Ok(indices[..n].iter().map(|&i| self.items[i].clone()).collect())
    }
}
