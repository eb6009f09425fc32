//! Double deep Q-learning: the online network picks the bootstrap action,
//! the periodically synchronised target network scores it.

use crate::env::{EnvState, Environment};
use crate::nn::{Adam, AdamConfig, Gradients, Mlp};
use crate::rng::{stream, SimRng};
use crate::{Error, Result};

use super::replay::{Experience, ReplayMemory};
use super::{argmax, select_action, Agent, Transition};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdqnConfig {
    /// Target-sync period in training iterations.
    pub n_target: u64,
    /// Minibatch size.
    pub batch: usize,
    pub replay_cap: usize,
    pub gamma: f64,
    /// Replay size required before training starts.
    pub warmup: usize,
}

impl Default for DdqnConfig {
    fn default() -> Self {
        DdqnConfig { n_target: 1000, batch: 32, replay_cap: 100_000, gamma: 0.9, warmup: 1000 }
    }
}

impl DdqnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_target == 0 {
            return Err(Error::config("agent.n_target", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("agent.batch", "must be positive"));
        }
        if self.replay_cap < self.batch {
            return Err(Error::config("agent.replay_cap", "must be at least agent.batch"));
        }
        if self.warmup == 0 {
            return Err(Error::config("agent.warmup", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("agent.gamma", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `r` on terminal transitions, otherwise
/// `r + gamma * Q_target(s', argmax_a Q_online(s', a))`.
pub fn ddqn_target(
    reward: f64,
    next_state: &[f64],
    terminal: bool,
    online: &Mlp,
    target: &Mlp,
    gamma: f64,
) -> Result<f64> {
    if terminal {
        return Ok(reward);
    }
    let best = argmax(&online.forward(next_state)?);
    Ok(reward + gamma * target.forward(next_state)?[best])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainOutcome {
    Trained { loss: f64, synced: bool },
    /// Replay smaller than `max(batch, warmup)`; nothing changed.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct DdqnAgent {
    pub online: Mlp,
    pub target: Mlp,
    pub optimizer: Adam,
    pub replay: ReplayMemory,
    pub config: DdqnConfig,
    iterations: u64,
    grads: Gradients,
    rng: SimRng,
}

impl DdqnAgent {
    /// `hidden` lists hidden-layer widths; input and output widths come from
    /// the environment.
    pub fn new(env: &Environment, hidden: &[usize], adam: AdamConfig, config: DdqnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![env.config().encoded_len()];
        sizes.extend_from_slice(hidden);
        sizes.push(env.num_actions());
        let mut rng = stream(seed);
        let online = Mlp::new(&sizes, &mut rng)?;
        Ok(Self::from_network(online, adam, config, rng))
    }

    pub fn from_network(online: Mlp, adam: AdamConfig, config: DdqnConfig, rng: SimRng) -> Self {
        DdqnAgent {
            target: online.clone(),
            optimizer: Adam::new(&online, adam),
            grads: Gradients::zeros_like(&online),
            replay: ReplayMemory::new(config.replay_cap),
            online,
            config,
            iterations: 0,
            rng,
        }
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    fn ready(&self) -> bool {
        self.replay.len() >= self.config.batch.max(self.config.warmup)
    }

    /// One gradient step on the mean squared DDQN error of `batch`.
    pub fn train_step(&mut self, batch: &[Experience]) -> Result<TrainOutcome> {
        if !self.ready() || batch.is_empty() {
            return Ok(TrainOutcome::Skipped);
        }
        self.train_on(batch.iter())
    }

    /// Samples a minibatch from replay and trains on it.
    pub fn train_from_replay(&mut self) -> Result<TrainOutcome> {
        if !self.ready() {
            return Ok(TrainOutcome::Skipped);
        }
        let idx = self.replay.sample_indices(self.config.batch, &mut self.rng);
        let DdqnAgent { online, target, optimizer, replay, config, iterations, grads, .. } = self;
        let loss = batch_gradient(online, target, config.gamma, idx.iter().map(|&i| replay.get(i)), grads)?;
        optimizer.apply(online, grads)?;
        *iterations += 1;
        Ok(TrainOutcome::Trained { loss, synced: self.sync_if_due() })
    }

    fn train_on<'a>(&mut self, batch: impl Iterator<Item = &'a Experience>) -> Result<TrainOutcome> {
        let loss = batch_gradient(&self.online, &self.target, self.config.gamma, batch, &mut self.grads)?;
        self.optimizer.apply(&mut self.online, &self.grads)?;
        self.iterations += 1;
        Ok(TrainOutcome::Trained { loss, synced: self.sync_if_due() })
    }

    fn sync_if_due(&mut self) -> bool {
        if self.iterations % self.config.n_target == 0 {
            self.target.clone_from(&self.online);
            return true;
        }
        false
    }

    pub fn q_values(&self, env: &Environment, state: &EnvState) -> Result<Vec<f64>> {
        self.online.forward(&env.encode(state))
    }
}

/// Mean per-example gradient into `grads`; returns the mean squared error.
fn batch_gradient<'a>(
    online: &Mlp,
    target: &Mlp,
    gamma: f64,
    batch: impl Iterator<Item = &'a Experience>,
    grads: &mut Gradients,
) -> Result<f64> {
    let batch: Vec<&Experience> = batch.collect();
    let scale = 1.0 / batch.len() as f64;
    grads.fill_zero();
    let mut loss = 0.0;
    for e in batch {
        let y = ddqn_target(e.reward, &e.next_state, e.terminal, online, target, gamma)?;
        loss += scale * online.accumulate_gradient(&e.state, e.action, y, scale, grads)?;
    }
    Ok(loss)
}

impl Agent for DdqnAgent {
    fn act(&mut self, env: &Environment, state: &EnvState, epsilon: f64) -> Result<usize> {
        let q = self.q_values(env, state)?;
        Ok(select_action(&q, epsilon, &mut self.rng))
    }

    fn greedy(&self, env: &Environment, state: &EnvState) -> Result<usize> {
        Ok(argmax(&self.q_values(env, state)?))
    }

    fn learn(&mut self, env: &Environment, t: Transition<'_>) -> Result<()> {
        self.replay.push(Experience {
            state: env.encode(t.state),
            action: t.action,
            reward: t.reward,
            next_state: env.encode(t.next_state),
            terminal: t.terminal,
        });
        self.train_from_replay()?;
        Ok(())
    }
}
