use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded shuffled mini-batch indices for one epoch. The final batch may be
/// short; every index appears exactly once.
#[derive(Debug, Clone)]
pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl BatchIter {
    /// # Panics
    /// If `batch_size` is zero.
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1, "batch size must be at least 1");
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        BatchIter {
            order,
            batch_size,
            pos: 0,
        }
    }

    /// Canonical order, no shuffling (evaluation).
    pub fn sequential(len: usize, batch_size: usize) -> Self {
        assert!(batch_size >= 1, "batch size must be at least 1");
        BatchIter {
            order: (0..len).collect(),
            batch_size,
            pos: 0,
        }
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}
