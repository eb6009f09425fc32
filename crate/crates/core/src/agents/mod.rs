//! Learners and the episode loop that drives them.

pub mod ddqn;
pub mod ql;
pub mod replay;
pub mod schedule;

use std::time::Instant;

use rand::Rng;

use crate::env::{EnvState, Environment, SlotOutcome};
use crate::{Error, Result};

pub use ddqn::{DdqnAgent, DdqnConfig};
pub use ql::QLearner;
pub use schedule::EpsilonSchedule;

/// One observed slot handed to a learner.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub state: &'a EnvState,
    pub action: usize,
    pub reward: f64,
    pub next_state: &'a EnvState,
    pub terminal: bool,
}

pub trait Agent {
    /// Epsilon-greedy action for `state`.
    fn act(&mut self, env: &Environment, state: &EnvState, epsilon: f64) -> Result<usize>;
    fn greedy(&self, env: &Environment, state: &EnvState) -> Result<usize>;
    fn learn(&mut self, env: &Environment, t: Transition<'_>) -> Result<()>;
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Uniform over all actions with probability `epsilon`, greedy otherwise.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax(q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FailureCounts {
    pub bad_channel: u32,
    pub rejected: u32,
    pub not_included: u32,
    pub attacked: u32,
}

impl FailureCounts {
    pub fn total(&self) -> u32 {
        self.bad_channel + self.rejected + self.not_included + self.attacked
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub total_reward: f64,
    pub successes: u32,
    pub no_transmit: u32,
    pub failures: FailureCounts,
    pub epsilon: f64,
    /// Seconds; excluded from equality-sensitive outputs.
    pub wall_time: f64,
}

impl EpisodeMetrics {
    pub fn slots(&self) -> u32 {
        self.successes + self.no_transmit + self.failures.total()
    }

    fn record(&mut self, outcome: SlotOutcome) {
        match outcome {
            SlotOutcome::Idle => self.no_transmit += 1,
            SlotOutcome::BadChannel => self.failures.bad_channel += 1,
            SlotOutcome::Rejected => self.failures.rejected += 1,
            SlotOutcome::NotIncluded => self.failures.not_included += 1,
            SlotOutcome::Attacked => self.failures.attacked += 1,
            SlotOutcome::Success => self.successes += 1,
        }
    }
}

/// Resets `env` with `seed` and plays one full episode, letting the agent
/// learn from every slot. Fails with [`Error::Invariant`] if a slot breaks
/// the causal chain or the reward bounds.
pub fn run_episode<A: Agent + ?Sized>(
    agent: &mut A,
    env: &mut Environment,
    schedule: &EpsilonSchedule,
    episode: usize,
    seed: u64,
) -> Result<EpisodeMetrics> {
    let start = Instant::now();
    let epsilon = schedule.value(episode);
    let (lo, hi) = env.config().reward_bounds();
    let mut metrics = EpisodeMetrics { episode, epsilon, ..Default::default() };
    let mut state = env.reset(seed).clone();
    loop {
        let action = agent.act(env, &state, epsilon)?;
        let step = env.step(action)?;
        check_step(&step.info, step.reward, lo, hi, env.slot())?;
        metrics.total_reward += step.reward;
        metrics.record(step.info.outcome());
        agent.learn(
            env,
            Transition {
                state: &state,
                action,
                reward: step.reward,
                next_state: &step.next_state,
                terminal: step.terminal,
            },
        )?;
        state = step.next_state;
        if step.terminal {
            break;
        }
    }
    if metrics.slots() as usize != env.config().slots {
        return Err(Error::Invariant(format!(
            "episode {episode}: {} slot outcomes for {} slots",
            metrics.slots(),
            env.config().slots
        )));
    }
    metrics.wall_time = start.elapsed().as_secs_f64();
    Ok(metrics)
}

fn check_step(info: &crate::env::StepInfo, reward: f64, lo: f64, hi: f64, slot: usize) -> Result<()> {
    if !info.is_causal() {
        return Err(Error::Invariant(format!("slot {slot}: non-causal step {info:?}")));
    }
    if !(lo..=hi).contains(&reward) {
        return Err(Error::Invariant(format!("slot {slot}: reward {reward} outside [{lo}, {hi}]")));
    }
    Ok(())
}

/// Plays one episode with the greedy policy and no learning.
pub fn evaluate_greedy<A: Agent + ?Sized>(agent: &A, env: &mut Environment, seed: u64) -> Result<EpisodeMetrics> {
    let mut metrics = EpisodeMetrics::default();
    let mut state = env.reset(seed).clone();
    loop {
        let step = env.step(agent.greedy(env, &state)?)?;
        metrics.total_reward += step.reward;
        metrics.record(step.info.outcome());
        state = step.next_state;
        if step.terminal {
            return Ok(metrics);
        }
    }
}
