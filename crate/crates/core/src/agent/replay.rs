//! FIFO experience replay.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::STATE_DIM;

/// One step of experience: the layer state seen, the sparsity action taken,
/// the reward observed, and the state that followed.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: [f64; STATE_DIM],
    pub action: f64,
    pub reward: f64,
    pub next_state: [f64; STATE_DIM],
    pub done: bool,
}

/// Bounded FIFO: pushing past capacity evicts the oldest transition.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    buf: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { buf: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, t: Transition) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.buf.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Transition> {
        (0..batch)
            .map(|_| self.buf[rng.random_range(0..self.buf.len())].clone())
            .collect()
    }
}
