//! Fixed-capacity ring buffer of augmented transitions.

use rand::Rng;

/// One stored step. Formulas are stored as indices into the trainer's
/// formula table so the task embedding is recomputed with the current
/// encoder whenever the transition is replayed.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub o_pn: Vec<f64>,
    pub next_o_pn: Vec<f64>,
    pub o_mp: [f64; 2],
    pub s_prop: [f64; 4],
    pub next_s_prop: [f64; 4],
    pub formula: usize,
    pub next_formula: usize,
    /// Action executed in the environment.
    pub action: Vec<f64>,
    /// Regression target for the noise estimator, refined in place by
    /// critic-gradient improvement each time the transition is replayed.
    pub improved: Vec<f64>,
    pub reward: f64,
    /// Whether the task formula was decided; bootstrapping stops there.
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    inserted: u64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of pushes, including overwritten ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let slot = (self.inserted % self.capacity as u64) as usize;
            self.items[slot] = item;
        }
        self.inserted += 1;
    }

    /// `n` indices drawn uniformly, with replacement, from the current fill.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut T {
        &mut self.items[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(i);
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.inserted(), 5);
        let mut items: Vec<_> = (0..3).map(|i| *b.get(i)).collect();
        items.sort();
        assert_eq!(items, vec![2, 3, 4]);
    }

    #[test]
    fn samples_stay_within_fill() {
        let mut b = ReplayBuffer::new(100);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample_indices(4, &mut rng).is_empty());
        for i in 0..7 {
            b.push(i);
        }
        assert!(b.sample_indices(1000, &mut rng).into_iter().all(|i| i < 7));
    }
}
