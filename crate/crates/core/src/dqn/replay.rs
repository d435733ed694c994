use std::collections::VecDeque;
use std::sync::Arc;

use crate::embedder::StateVector;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Arc<StateVector>,
    pub a: usize,
    /// Normalized reward in [0, 1].
    pub r: f64,
    pub s_next: Arc<StateVector>,
    pub terminal: bool,
}

/// Bounded FIFO of transitions with seeded uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
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

    /// Append, evicting the oldest transition when full. Rejects rewards
    /// outside [0, 1].
    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !(0.0..=1.0).contains(&t.r) {
            return Err(Error::invalid(format!("reward {} outside [0, 1]", t.r)));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `batch` draws uniformly with replacement.
    pub fn sample(&self, batch: usize, rng: &mut SeededRng) -> Result<Vec<&Transition>> {
        if batch == 0 || self.items.len() < batch {
            return Err(Error::invalid(format!(
                "cannot sample {batch} transitions from a buffer holding {}",
                self.items.len()
            )));
        }
        Ok((0..batch).map(|_| &self.items[rng.below(self.items.len())]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::hash_embed;

    fn t(a: usize) -> Transition {
        let s = Arc::new(hash_embed("x"));
        Transition {
            s: s.clone(),
            a,
            r: 0.5,
            s_next: s,
            terminal: false,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3);
        for a in 0..4 {
            b.push(t(a)).unwrap();
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.iter().map(|x| x.a).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn sampling() {
        let mut b = ReplayBuffer::new(500);
        for a in 0..200 {
            b.push(t(a)).unwrap();
        }
        let x: Vec<usize> = b.sample(128, &mut SeededRng::new(5)).unwrap().iter().map(|t| t.a).collect();
        let y: Vec<usize> = b.sample(128, &mut SeededRng::new(5)).unwrap().iter().map(|t| t.a).collect();
        assert_eq!(x.len(), 128);
        assert_eq!(x, y);
        assert!(b.sample(201, &mut SeededRng::new(5)).is_err());
    }

    #[test]
    fn rejects_out_of_range_reward() {
        let mut b = ReplayBuffer::new(2);
        let mut bad = t(0);
        bad.r = 1.5;
        assert!(b.push(bad).is_err());
    }
}
