//! The secondary user's per-slot decision process.
//!
//! Each slot the agent either stays idle (action 0) or senses and transmits
//! on channel `a - 1`. A slot runs in a fixed order: sense and submit, background
//! arrivals, block formation, attack draw, reward, channel transition,
//! history update.

use std::io::Write;

use rand::Rng;

use crate::attack::{attack_probability, AttackParams};
use crate::channel::{ChannelConfig, ChannelJointState, ChannelModel, ObservationHistory};
use crate::mempool::{MempoolConfig, MempoolState};
use crate::rng::{sample_weighted, stream, SimRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParams {
    pub success: f64,
    pub channel_cost: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams { success: 1.0, channel_cost: 0.2 }
    }
}

impl RewardParams {
    pub fn reward(&self, outcome: SlotOutcome, fee: f64) -> f64 {
        match outcome {
            SlotOutcome::Idle => 0.0,
            SlotOutcome::BadChannel | SlotOutcome::Rejected => -self.channel_cost,
            SlotOutcome::NotIncluded | SlotOutcome::Attacked => -self.channel_cost - fee,
            SlotOutcome::Success => self.success - self.channel_cost - fee,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub channel: ChannelConfig,
    pub mempool: MempoolConfig,
    pub attack: AttackParams,
    pub reward: RewardParams,
    /// Episode length `T` in slots.
    pub slots: usize,
    /// History length `L`.
    pub history_len: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            channel: ChannelConfig::default(),
            mempool: MempoolConfig::default(),
            attack: AttackParams::default(),
            reward: RewardParams::default(),
            slots: 1000,
            history_len: 4,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.mempool.validate()?;
        self.attack.validate()?;
        if !(self.reward.success > 0.0 && self.reward.success.is_finite()) {
            return Err(Error::config("env.R_success", "must be positive"));
        }
        if !(self.reward.channel_cost >= 0.0 && self.reward.channel_cost.is_finite()) {
            return Err(Error::config("env.C_c", "must be nonnegative"));
        }
        if self.slots == 0 {
            return Err(Error::config("env.T_slots", "must be at least 1"));
        }
        if self.history_len == 0 {
            return Err(Error::config("env.L", "must be at least 1"));
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        self.channel.channels + 1
    }

    /// Width of [`EncodedState`]: `L (K + 2) + M + 1`.
    pub fn encoded_len(&self) -> usize {
        self.history_len * (self.channel.channels + 2) + self.mempool.bins + 1
    }

    /// Smallest and largest possible per-slot reward.
    pub fn reward_bounds(&self) -> (f64, f64) {
        let r = &self.reward;
        (-r.channel_cost - self.mempool.fee_max.max(0.0), r.success - r.channel_cost - self.mempool.fee_min.min(0.0))
    }
}

/// Agent-visible state: channel observation history and mempool contents.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub history: ObservationHistory,
    pub mempool: MempoolState,
}

/// Exact discrete key of an [`EnvState`]: history pairs, bin counts, SU flag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey(Vec<u16>);

impl EnvState {
    pub fn key(&self) -> StateKey {
        let mut key = Vec::with_capacity(self.history.len() + self.mempool.bin_counts().len() + 1);
        key.extend(self.history.iter().map(|o| (o.action as u16) << 1 | u16::from(o.good)));
        key.extend(self.mempool.bin_counts().iter().map(|&c| c as u16));
        key.push(u16::from(self.mempool.su_tx().is_some()));
        StateKey(key)
    }
}

/// Fixed-width network input with every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncodedState(Vec<f64>);

impl EncodedState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for EncodedState {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// How a slot ended for the secondary user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotOutcome {
    Idle,
    BadChannel,
    Rejected,
    NotIncluded,
    Attacked,
    Success,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepInfo {
    pub action: usize,
    pub channel_good: bool,
    pub accepted: bool,
    pub included: bool,
    pub attacked: bool,
    pub fee_paid: f64,
}

impl StepInfo {
    /// attacked => included => accepted => channel_good => action != 0
    pub fn is_causal(&self) -> bool {
        (!self.attacked || self.included)
            && (!self.included || self.accepted)
            && (!self.accepted || self.channel_good)
            && (!self.channel_good || self.action != 0)
            && (self.accepted || self.fee_paid == 0.0)
    }

    pub fn outcome(&self) -> SlotOutcome {
        match (self.action, self.channel_good, self.accepted, self.included, self.attacked) {
            (0, ..) => SlotOutcome::Idle,
            (_, false, ..) => SlotOutcome::BadChannel,
            (_, true, false, ..) => SlotOutcome::Rejected,
            (_, true, true, false, _) => SlotOutcome::NotIncluded,
            (_, true, true, true, true) => SlotOutcome::Attacked,
            (_, true, true, true, false) => SlotOutcome::Success,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub info: StepInfo,
    /// Raised on the last slot of the episode.
    pub terminal: bool,
}

/// The simulator. Owns the hidden channel state and its random stream.
#[derive(Debug, Clone)]
pub struct Environment {
    cfg: EnvConfig,
    channel: ChannelModel,
    attack_prob: f64,
    initial_channel: Vec<(usize, f64)>,
    channel_state: ChannelJointState,
    state: EnvState,
    slot: usize,
    rng: SimRng,
}

impl Environment {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let channel = ChannelModel::new(cfg.channel.clone())?;
        let initial_channel = initial_channel_distribution(&channel);
        let attack_prob = attack_probability(&cfg.attack);
        let state = EnvState {
            history: ObservationHistory::new(cfg.history_len),
            mempool: MempoolState::empty(&cfg.mempool),
        };
        Ok(Environment {
            cfg,
            channel,
            attack_prob,
            initial_channel,
            channel_state: ChannelJointState(0),
            state,
            slot: 0,
            rng: stream(0),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn channel_model(&self) -> &ChannelModel {
        &self.channel
    }

    pub fn attack_prob(&self) -> f64 {
        self.attack_prob
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn channel_state(&self) -> ChannelJointState {
        self.channel_state
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn num_actions(&self) -> usize {
        self.cfg.num_actions()
    }

    /// Starts an episode: sentinel history, channel drawn from its stationary
    /// distribution, one slot of background arrivals.
    pub fn reset(&mut self, seed: u64) -> &EnvState {
        self.rng = stream(seed);
        self.slot = 0;
        self.channel_state = ChannelJointState(sample_weighted(&mut self.rng, &self.initial_channel));
        let mut mempool = MempoolState::empty(&self.cfg.mempool);
        mempool.inject_arrivals(&self.cfg.mempool, &mut self.rng);
        self.state = EnvState { history: ObservationHistory::new(self.cfg.history_len), mempool };
        &self.state
    }

    /// Overrides the hidden and visible state; used by oracles and tests.
    pub fn set_state(&mut self, channel: ChannelJointState, state: EnvState) {
        self.channel_state = channel;
        self.state = state;
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if action > self.cfg.channel.channels {
            return Err(Error::InvalidAction { action, max: self.cfg.channel.channels });
        }
        let mp_cfg = &self.cfg.mempool;
        let mut info = StepInfo { action, ..StepInfo::default() };
        let mut fee = 0.0;

        let bit = self.channel.observe(self.channel_state, action);
        info.channel_good = bit == 1;
        if info.channel_good {
            fee = mp_cfg.draw_fee(&mut self.rng);
            info.accepted = self.state.mempool.submit_su_tx(fee, mp_cfg)?;
            if info.accepted {
                info.fee_paid = fee;
            }
        }
        self.state.mempool.inject_arrivals(mp_cfg, &mut self.rng);
        let block = self.state.mempool.form_block(mp_cfg, &mut self.rng);
        info.included = block.su_included;
        if info.included {
            info.attacked = self.rng.gen::<f64>() < self.attack_prob;
        }
        let reward = self.cfg.reward.reward(info.outcome(), fee);
        self.channel_state = self.channel.step(self.channel_state, &mut self.rng);
        self.state.history.push(action, bit);
        self.slot += 1;

        Ok(StepResult {
            next_state: self.state.clone(),
            reward,
            info,
            terminal: self.slot >= self.cfg.slots,
        })
    }

    pub fn encode(&self, state: &EnvState) -> EncodedState {
        encode(&self.cfg, state)
    }
}

/// Stationary distribution when the chain is irreducible, otherwise uniform.
fn initial_channel_distribution(channel: &ChannelModel) -> Vec<(usize, f64)> {
    let n = channel.num_states();
    match channel.stationary_distribution() {
        Ok(pi) => pi.into_iter().enumerate().filter(|(_, p)| *p > 0.0).collect(),
        Err(_) => (0..n).map(|i| (i, 1.0 / n as f64)).collect(),
    }
}

/// History block: per slot a one-hot action over `K + 1` then the
/// observation bit. Then bin counts over `D_max`, then the SU-pending bit.
pub fn encode(cfg: &EnvConfig, state: &EnvState) -> EncodedState {
    let k = cfg.channel.channels;
    let mut v = vec![0.0; cfg.encoded_len()];
    for (slot, obs) in state.history.iter().enumerate() {
        let base = slot * (k + 2);
        v[base + obs.action.min(k)] = 1.0;
        v[base + k + 1] = f64::from(u8::from(obs.good));
    }
    let base = cfg.history_len * (k + 2);
    let cap = cfg.mempool.capacity as f64;
    for (i, &c) in state.mempool.bin_counts().iter().enumerate() {
        v[base + i] = (c as f64 / cap).min(1.0);
    }
    v[base + cfg.mempool.bins] = f64::from(u8::from(state.mempool.su_tx().is_some()));
    EncodedState(v)
}

pub const TRACE_HEADER: &str = "slot,action,channel_good,accepted,included,attacked,fee,reward";

/// Writes one trajectory row in the trace CSV layout.
pub fn write_trace_row<W: Write>(out: &mut W, slot: usize, info: &StepInfo, reward: f64) -> std::io::Result<()> {
    writeln!(
        out,
        "{slot},{},{},{},{},{},{},{}",
        info.action,
        u8::from(info.channel_good),
        u8::from(info.accepted),
        u8::from(info.included),
        u8::from(info.attacked),
        info.fee_paid,
        reward
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Observation;

    fn env(cfg: EnvConfig) -> Environment {
        Environment::new(cfg).unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_sentinel() {
        let mut e = env(EnvConfig::default());
        let a = e.reset(7).clone();
        let ca = e.channel_state();
        let b = e.reset(7).clone();
        assert_eq!(a, b);
        assert_eq!(ca, e.channel_state());
        assert!(a.history.iter().all(|o| *o == Observation::SENTINEL));
        assert_eq!(a.history.len(), 4);
    }

    #[test]
    fn mean_initial_occupancy() {
        let mut e = env(EnvConfig::default());
        let n = 10_000;
        let total: usize = (0..n).map(|s| e.reset(s).mempool.occupancy()).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 2.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn idle_action_earns_nothing_but_mempool_moves() {
        let cfg = EnvConfig {
            mempool: MempoolConfig { arrivals_min: 3, arrivals_max: 3, add_min: 1, add_max: 1, ..Default::default() },
            ..Default::default()
        };
        let mut e = env(cfg);
        let before = e.reset(1).mempool.occupancy();
        let r = e.step(0).unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(r.info.outcome(), SlotOutcome::Idle);
        assert_eq!(r.next_state.mempool.occupancy(), before + 2);
    }

    #[test]
    fn bad_channel_costs_channel_fee_only() {
        let mut e = env(EnvConfig::default());
        e.reset(2);
        let good = e.channel_state().0;
        let bad_action = (good + 1) % 4 + 1;
        let r = e.step(bad_action).unwrap();
        assert!(!r.info.channel_good);
        assert_eq!(r.reward, -0.2);
        assert_eq!(r.next_state.history.newest(), Some(&Observation::new(bad_action, 0)));
    }

    #[test]
    fn success_reward_arithmetic() {
        let r = RewardParams { success: 1.0, channel_cost: 0.2 };
        assert!((r.reward(SlotOutcome::Success, 0.3) - 0.5).abs() < 1e-15);
        assert_eq!(r.reward(SlotOutcome::Attacked, 0.3), -0.5);
        assert_eq!(r.reward(SlotOutcome::NotIncluded, 0.3), -0.5);
        assert_eq!(r.reward(SlotOutcome::Rejected, 0.3), -0.2);
    }

    #[test]
    fn good_channel_transmission_succeeds_in_light_mempool() {
        let cfg = EnvConfig {
            attack: AttackParams { q: 0.0, n: 1 },
            mempool: MempoolConfig { arrivals_min: 0, arrivals_max: 0, add_min: 1, add_max: 1, ..Default::default() },
            ..Default::default()
        };
        let mut e = env(cfg);
        e.reset(3);
        let good = e.channel_state().0;
        let r = e.step(good + 1).unwrap();
        assert_eq!(r.info.outcome(), SlotOutcome::Success);
        assert!((r.reward - (0.8 - r.info.fee_paid)).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_action() {
        let mut e = env(EnvConfig::default());
        e.reset(0);
        assert!(matches!(e.step(5), Err(Error::InvalidAction { action: 5, max: 4 })));
    }

    #[test]
    fn terminal_on_last_slot() {
        let mut e = env(EnvConfig { slots: 3, ..Default::default() });
        e.reset(0);
        assert!(!e.step(0).unwrap().terminal);
        assert!(!e.step(0).unwrap().terminal);
        assert!(e.step(0).unwrap().terminal);
    }

    #[test]
    fn encoding_layout() {
        let cfg = EnvConfig::default();
        let mut e = env(cfg.clone());
        let s = e.reset(0).clone();
        let v = e.encode(&s);
        assert_eq!(v.len(), 4 * 6 + 5 + 1);
        for slot in 0..4 {
            let block = &v[slot * 6..slot * 6 + 6];
            assert_eq!(block, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
        let full = EnvState { history: s.history.clone(), mempool: MempoolState::from_counts(vec![50, 0, 0, 0, 0]) };
        assert_eq!(e.encode(&full)[24], 1.0);

        let mut with_su = full.clone();
        with_su.mempool = MempoolState::from_counts(vec![10, 0, 0, 0, 0]);
        let without = e.encode(&with_su);
        with_su.mempool.submit_su_tx(0.5, &cfg.mempool).unwrap();
        let with = e.encode(&with_su);
        let diffs: Vec<usize> = (0..with.len()).filter(|&i| with[i] != without[i]).collect();
        assert_eq!(diffs, vec![with.len() - 1]);
    }

    #[test]
    fn no_attacks_without_attacker() {
        let cfg = EnvConfig { attack: AttackParams { q: 0.0, n: 1 }, ..Default::default() };
        let mut e = env(cfg);
        e.reset(5);
        let mut rng = stream(11);
        for _ in 0..20_000 {
            let r = e.step(rng.gen_range(0..5)).unwrap();
            assert!(!r.info.attacked);
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = |seed| {
            let mut e = env(EnvConfig::default());
            e.reset(seed);
            (0..500).map(|t| e.step(t % 5).unwrap()).map(|r| (r.reward.to_bits(), r.info.outcome())).collect::<Vec<_>>()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn trace_row_format() {
        let info = StepInfo { action: 2, channel_good: true, accepted: true, included: true, attacked: false, fee_paid: 0.25 };
        let mut buf = Vec::new();
        write_trace_row(&mut buf, 7, &info, 0.55).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "7,2,1,1,1,0,0.25,0.55\n");
    }
}
