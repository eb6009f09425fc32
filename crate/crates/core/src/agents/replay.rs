use rand::seq::index;
use rand::Rng;

use crate::env::EncodedState;

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: EncodedState,
    pub action: usize,
    pub reward: f64,
    pub next_state: EncodedState,
    pub terminal: bool,
}

/// Fixed-capacity ring buffer; once full, each insertion evicts the oldest
/// experience.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    buf: Vec<Experience>,
    cap: usize,
    /// Slot the next insertion overwrites once the buffer is full.
    head: usize,
    inserted: u64,
}

impl ReplayMemory {
    pub fn new(cap: usize) -> Self {
        assert!(cap > 0, "replay capacity must be positive");
        ReplayMemory { buf: Vec::with_capacity(cap.min(1 << 16)), cap, head: 0, inserted: 0 }
    }

    pub fn push(&mut self, e: Experience) {
        if self.buf.len() < self.cap {
            self.buf.push(e);
        } else {
            self.buf[self.head] = e;
            self.head = (self.head + 1) % self.cap;
        }
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, i: usize) -> &Experience {
        &self.buf[i]
    }

    /// Distinct uniformly chosen positions.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        index::sample(rng, self.buf.len(), n.min(self.buf.len())).into_vec()
    }

    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Experience> {
        let (newer, older) = self.buf.split_at(self.head);
        older.iter().chain(newer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn exp(tag: usize) -> Experience {
        Experience {
            state: crate::env::encode(&Default::default(), &blank()),
            action: tag,
            reward: tag as f64,
            next_state: crate::env::encode(&Default::default(), &blank()),
            terminal: false,
        }
    }

    fn blank() -> crate::env::EnvState {
        crate::env::EnvState {
            history: crate::channel::ObservationHistory::new(4),
            mempool: crate::mempool::MempoolState::empty(&Default::default()),
        }
    }

    #[test]
    fn evicts_oldest_first() {
        let mut m = ReplayMemory::new(5);
        for i in 0..8 {
            m.push(exp(i));
        }
        assert_eq!(m.len(), 5);
        assert_eq!(m.inserted(), 8);
        let order: Vec<usize> = m.iter_oldest_first().map(|e| e.action).collect();
        assert_eq!(order, vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn samples_distinct_positions() {
        let mut m = ReplayMemory::new(50);
        for i in 0..40 {
            m.push(exp(i));
        }
        let mut idx = m.sample_indices(32, &mut stream(1));
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 32);
        assert!(idx.iter().all(|&i| i < 40));
    }
}
