//! Tabular Q-learning over the exact discrete state.

use std::collections::HashMap;

use crate::env::{EnvState, Environment, StateKey};
use crate::rng::{stream, SimRng};
use crate::Result;

use super::{argmax, select_action, Agent, Transition};

/// Q-values keyed by exact state; unvisited entries read as zero.
#[derive(Debug, Clone)]
pub struct QTable {
    values: HashMap<StateKey, Vec<f64>>,
    zeros: Vec<f64>,
}

impl QTable {
    pub fn new(num_actions: usize) -> Self {
        QTable { values: HashMap::new(), zeros: vec![0.0; num_actions] }
    }

    pub fn get(&self, key: &StateKey) -> &[f64] {
        self.values.get(key).map_or(&self.zeros, Vec::as_slice)
    }

    pub fn set(&mut self, key: StateKey, action: usize, value: f64) {
        let zeros = &self.zeros;
        self.values.entry(key).or_insert_with(|| zeros.clone())[action] = value;
    }

    /// Number of states with a stored entry.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `Q(s,a) <- (1 - lr) Q(s,a) + lr (r + gamma max_a' Q(s',a'))`
    pub fn update(&mut self, state: &StateKey, action: usize, reward: f64, next: &StateKey, lr: f64, gamma: f64) {
        let best_next = self.get(next).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let old = self.get(state)[action];
        let new = (1.0 - lr) * old + lr * (reward + gamma * best_next);
        if new != old {
            self.set(state.clone(), action, new);
        }
    }
}

#[derive(Debug, Clone)]
pub struct QLearner {
    pub table: QTable,
    pub learning_rate: f64,
    pub gamma: f64,
    rng: SimRng,
}

impl QLearner {
    pub fn new(num_actions: usize, learning_rate: f64, gamma: f64, seed: u64) -> Self {
        QLearner { table: QTable::new(num_actions), learning_rate, gamma, rng: stream(seed) }
    }

    pub fn greedy_for(&self, state: &EnvState) -> usize {
        argmax(self.table.get(&state.key()))
    }
}

impl Agent for QLearner {
    fn act(&mut self, _env: &Environment, state: &EnvState, epsilon: f64) -> Result<usize> {
        let key = state.key();
        Ok(select_action(self.table.get(&key), epsilon, &mut self.rng))
    }

    fn greedy(&self, _env: &Environment, state: &EnvState) -> Result<usize> {
        Ok(self.greedy_for(state))
    }

    fn learn(&mut self, _env: &Environment, t: Transition<'_>) -> Result<()> {
        self.table.update(&t.state.key(), t.action, t.reward, &t.next_state.key(), self.learning_rate, self.gamma);
        Ok(())
    }
}
