use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    /// 0/1 per candidate.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        self.reward.is_finite()
            && self.state.iter().all(|v| v.is_finite())
            && self.next_state.iter().all(|v| v.is_finite())
            && self.action.iter().all(|v| v.is_finite())
    }
}

/// FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
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

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "replay push" });
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    /// Oldest first.
    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `n` distinct transitions chosen uniformly.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<&Transition>> {
        if n > self.items.len() {
            return Err(Error::invalid(format!("batch {n} exceeds buffer size {}", self.items.len())));
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}
