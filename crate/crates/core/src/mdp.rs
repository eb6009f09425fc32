//! Exact enumeration of tiny environment configurations and dynamic
//! programming over the result.
//!
//! [`enumerate_small_mdp`] tracks the hidden channel state alongside the
//! visible state, so the model is exactly Markov for any channel chain.
//! [`enumerate_observed_mdp`] drops the channel from the state; this is exact
//! only when every row of the channel chain is the same distribution (the
//! channel is then redrawn independently each slot), which is the setting in
//! which an agent that sees only the history and the mempool can be compared
//! against an optimal policy.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::attack::attack_probability;
use crate::channel::{ChannelJointState, ChannelModel, ObservationHistory};
use crate::env::{EnvConfig, EnvState, RewardParams, SlotOutcome};
use crate::mempool::{MempoolConfig, MempoolState};
use crate::{Error, Result};

/// Upper bound on the enumerated state-space size.
pub const MAX_STATES: u128 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MdpState {
    /// Hidden channel state; `None` in the observed model.
    pub channel: Option<ChannelJointState>,
    pub history: ObservationHistory,
    pub bins: Vec<usize>,
}

impl MdpState {
    /// The agent-visible part. Between slots no SU transaction is pending.
    pub fn env_state(&self) -> EnvState {
        EnvState { history: self.history.clone(), mempool: MempoolState::from_counts(self.bins.clone()) }
    }
}

#[derive(Debug, Clone)]
pub struct SmallMdp {
    pub states: Vec<MdpState>,
    pub num_actions: usize,
    /// `transitions[s][a]` lists `(s', probability)`.
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    /// Expected one-slot reward `rewards[s][a]`.
    pub rewards: Vec<Vec<f64>>,
    /// Distribution of the state right after a reset.
    pub initial: Vec<(usize, f64)>,
    index: HashMap<MdpState, usize>,
}

impl SmallMdp {
    pub fn index_of(&self, state: &MdpState) -> Option<usize> {
        self.index.get(state).copied()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Full Markov model over (channel state, history, bin counts).
pub fn enumerate_small_mdp(cfg: &EnvConfig) -> Result<SmallMdp> {
    Enumerator::new(cfg, false)?.run()
}

/// Model over (history, bin counts) only; requires an i.i.d. channel chain.
pub fn enumerate_observed_mdp(cfg: &EnvConfig) -> Result<SmallMdp> {
    Enumerator::new(cfg, true)?.run()
}

/// Product-space bound: channel states x history words x bin compositions.
pub fn state_space_bound(cfg: &EnvConfig, channel_states: usize) -> u128 {
    let pairs = 2 * cfg.channel.channels as u128 + 1;
    let histories = pairs.saturating_pow(cfg.history_len as u32);
    let bins = binomial(cfg.mempool.capacity as u128 + cfg.mempool.bins as u128, cfg.mempool.bins as u128);
    (channel_states as u128).saturating_mul(histories).saturating_mul(bins)
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

struct Enumerator<'a> {
    cfg: &'a EnvConfig,
    channel: ChannelModel,
    /// Per-slot channel distribution in the observed model.
    iid_row: Option<Vec<(usize, f64)>>,
    initial_channel: Vec<(usize, f64)>,
    attack_prob: f64,
    /// Multinomial compositions of `n` arrivals over the bins.
    compositions: Vec<Vec<(Vec<usize>, f64)>>,
}

impl<'a> Enumerator<'a> {
    fn new(cfg: &'a EnvConfig, observed: bool) -> Result<Self> {
        cfg.validate()?;
        let channel = ChannelModel::new(cfg.channel.clone())?;
        let hidden_states = if observed { 1 } else { channel.num_states() };
        let bound = state_space_bound(cfg, hidden_states);
        if bound > MAX_STATES {
            return Err(Error::StateSpaceTooLarge { size: bound, limit: MAX_STATES });
        }
        let iid_row = if observed {
            let first = channel.row(ChannelJointState(0)).to_vec();
            let identical = (0..channel.num_states()).all(|s| rows_equal(channel.row(ChannelJointState(s)), &first));
            if !identical {
                return Err(Error::config(
                    "channels.matrix_path",
                    "observed model needs identical transition rows (i.i.d. channel)",
                ));
            }
            Some(first)
        } else {
            None
        };
        let initial_channel = match channel.stationary_distribution() {
            Ok(pi) => pi.into_iter().enumerate().filter(|(_, p)| *p > 0.0).collect(),
            Err(_) => {
                let n = channel.num_states();
                (0..n).map(|i| (i, 1.0 / n as f64)).collect()
            }
        };
        let max_arrivals = cfg.mempool.arrivals_max.min(cfg.mempool.capacity);
        let compositions = (0..=max_arrivals).map(|n| compositions(n, cfg.mempool.bins)).collect();
        Ok(Enumerator {
            cfg,
            channel,
            iid_row,
            initial_channel,
            attack_prob: attack_probability(&cfg.attack),
            compositions,
        })
    }

    fn observed(&self) -> bool {
        self.iid_row.is_some()
    }

    fn run(self) -> Result<SmallMdp> {
        let mut states: Vec<MdpState> = Vec::new();
        let mut index: HashMap<MdpState, usize> = HashMap::new();
        let mut queue = VecDeque::new();
        let mut intern = |s: MdpState, states: &mut Vec<MdpState>, queue: &mut VecDeque<usize>| -> usize {
            if let Some(&i) = index.get(&s) {
                return i;
            }
            let i = states.len();
            index.insert(s.clone(), i);
            states.push(s);
            queue.push_back(i);
            i
        };

        let mut initial: BTreeMap<usize, f64> = BTreeMap::new();
        let empty = vec![0; self.cfg.mempool.bins];
        let sentinel = ObservationHistory::new(self.cfg.history_len);
        for (bins, p_bins) in self.arrivals(&empty) {
            let channels: Vec<(Option<ChannelJointState>, f64)> = if self.observed() {
                vec![(None, 1.0)]
            } else {
                self.initial_channel.iter().map(|&(c, p)| (Some(ChannelJointState(c)), p)).collect()
            };
            for (channel, p_c) in channels {
                let s = MdpState { channel, history: sentinel.clone(), bins: bins.clone() };
                let i = intern(s, &mut states, &mut queue);
                *initial.entry(i).or_default() += p_bins * p_c;
            }
        }

        let num_actions = self.cfg.num_actions();
        let mut transitions: Vec<Vec<Vec<(usize, f64)>>> = Vec::new();
        let mut rewards: Vec<Vec<f64>> = Vec::new();
        while let Some(i) = queue.pop_front() {
            if transitions.len() <= i {
                transitions.resize(i + 1, Vec::new());
                rewards.resize(i + 1, Vec::new());
            }
            let state = states[i].clone();
            let mut per_action = Vec::with_capacity(num_actions);
            let mut per_action_reward = Vec::with_capacity(num_actions);
            for action in 0..num_actions {
                let (next, reward) = self.expand(&state, action);
                let mut row: BTreeMap<usize, f64> = BTreeMap::new();
                for (s, p) in next {
                    let j = intern(s, &mut states, &mut queue);
                    *row.entry(j).or_default() += p;
                }
                per_action.push(row.into_iter().collect());
                per_action_reward.push(reward);
            }
            transitions[i] = per_action;
            rewards[i] = per_action_reward;
        }
        transitions.resize(states.len(), Vec::new());
        rewards.resize(states.len(), Vec::new());

        let index = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        Ok(SmallMdp { states, num_actions, transitions, rewards, initial: initial.into_iter().collect(), index })
    }

    /// Successor distribution and expected reward of one slot.
    fn expand(&self, state: &MdpState, action: usize) -> (Vec<(MdpState, f64)>, f64) {
        let now: Vec<(ChannelJointState, f64)> = match (&self.iid_row, state.channel) {
            (Some(row), _) => row.iter().map(|&(c, p)| (ChannelJointState(c), p)).collect(),
            (None, Some(c)) => vec![(c, 1.0)],
            (None, None) => unreachable!("full model states carry a channel"),
        };
        let mut out: BTreeMap<MdpState, f64> = BTreeMap::new();
        let mut expected_reward = 0.0;
        for (channel_now, p_channel) in now {
            let bit = self.channel.observe(channel_now, action);
            if action != 0 && bit == 0 {
                expected_reward += p_channel * self.cfg.reward.reward(SlotOutcome::BadChannel, 0.0);
            }
            let history = state.history.pushed(action, bit);
            let next_channels: Vec<(Option<ChannelJointState>, f64)> = if self.observed() {
                vec![(None, 1.0)]
            } else {
                self.channel.row(channel_now).iter().map(|&(c, p)| (Some(ChannelJointState(c)), p)).collect()
            };
            for (bins, p_bins, reward) in slot_mempool_outcomes(
                &self.cfg.mempool,
                &self.cfg.reward,
                self.attack_prob,
                &state.bins,
                action != 0 && bit == 1,
                &self.compositions,
            ) {
                expected_reward += p_channel * p_bins * reward;
                for (channel, p_next) in &next_channels {
                    let s = MdpState { channel: *channel, history: history.clone(), bins: bins.clone() };
                    *out.entry(s).or_default() += p_channel * p_bins * p_next;
                }
            }
        }
        (out.into_iter().collect(), expected_reward)
    }

    fn arrivals(&self, bins: &[usize]) -> Vec<(Vec<usize>, f64)> {
        arrival_outcomes(&self.cfg.mempool, bins, 0, &self.compositions)
    }
}

fn rows_equal(a: &[(usize, f64)], b: &[(usize, f64)]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.0 == y.0 && (x.1 - y.1).abs() < 1e-12)
}

/// All ways to place `n` arrivals into `m` equiprobable bins, with
/// multinomial probabilities.
fn compositions(n: usize, m: usize) -> Vec<(Vec<usize>, f64)> {
    fn rec(n: usize, m: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == m - 1 {
            prefix.push(n);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=n {
            prefix.push(k);
            rec(n - k, m, prefix, out);
            prefix.pop();
        }
    }
    let mut raw = Vec::new();
    rec(n, m, &mut Vec::new(), &mut raw);
    let ln_fact = |k: usize| (1..=k).map(|i| (i as f64).ln()).sum::<f64>();
    raw.into_iter()
        .map(|counts| {
            let ln_p = ln_fact(n) - counts.iter().map(|&c| ln_fact(c)).sum::<f64>() - n as f64 * (m as f64).ln();
            (counts, ln_p.exp())
        })
        .collect()
}

/// Background arrivals onto `bins` with `extra` additional occupied slots.
fn arrival_outcomes(
    cfg: &MempoolConfig,
    bins: &[usize],
    extra: usize,
    comps: &[Vec<(Vec<usize>, f64)>],
) -> Vec<(Vec<usize>, f64)> {
    let occupancy = bins.iter().sum::<usize>() + extra;
    let space = cfg.capacity.saturating_sub(occupancy);
    let span = (cfg.arrivals_max - cfg.arrivals_min + 1) as f64;
    let mut out = Vec::new();
    for n in cfg.arrivals_min..=cfg.arrivals_max {
        let admitted = n.min(space);
        for (add, p) in &comps[admitted] {
            let next: Vec<usize> = bins.iter().zip(add).map(|(b, a)| b + a).collect();
            out.push((next, p / span));
        }
    }
    out
}

/// Mempool half of a slot: optional SU submission, arrivals, block
/// formation and attack draw. Yields `(bins after, probability, reward)`.
fn slot_mempool_outcomes(
    cfg: &MempoolConfig,
    reward: &RewardParams,
    attack_prob: f64,
    bins: &[usize],
    transmit_on_good: bool,
    comps: &[Vec<(Vec<usize>, f64)>],
) -> Vec<(Vec<usize>, f64, f64)> {
    let mut out = Vec::new();
    let occupancy: usize = bins.iter().sum();
    // (su bin if accepted, probability, fee, outcome when never included)
    let mut submissions: Vec<(Option<usize>, f64, f64)> = Vec::new();
    if transmit_on_good {
        for b in 0..cfg.bins {
            let p = 1.0 / cfg.bins as f64;
            let fee = cfg.bin_midpoint(b);
            if occupancy < cfg.capacity {
                submissions.push((Some(b), p, fee));
            } else {
                submissions.push((None, p, fee));
            }
        }
    } else {
        submissions.push((None, 1.0, 0.0));
    }
    let add_span = (cfg.add_max - cfg.add_min + 1) as f64;
    for (su_bin, p_sub, fee) in submissions {
        let pre_block = arrival_outcomes(cfg, bins, usize::from(su_bin.is_some()), comps);
        for (after_arrivals, p_arr) in pre_block {
            for n_add in cfg.add_min..=cfg.add_max {
                for (after_block, p_blk, included) in drain(&after_arrivals, su_bin, n_add) {
                    let p = p_sub * p_arr * p_blk / add_span;
                    let base = match (transmit_on_good, su_bin.is_some(), included) {
                        (false, ..) => None,
                        (true, false, _) => Some(SlotOutcome::Rejected),
                        (true, true, false) => Some(SlotOutcome::NotIncluded),
                        (true, true, true) => Some(SlotOutcome::Success),
                    };
                    match base {
                        // idle and bad-channel slots are scored by the caller's action
                        None => out.push((after_block, p, 0.0)),
                        Some(SlotOutcome::Success) => {
                            out.push((after_block.clone(), p * (1.0 - attack_prob), reward.reward(SlotOutcome::Success, fee)));
                            if attack_prob > 0.0 {
                                out.push((after_block, p * attack_prob, reward.reward(SlotOutcome::Attacked, fee)));
                            }
                        }
                        Some(o) => out.push((after_block, p, reward.reward(o, fee))),
                    }
                }
            }
        }
    }
    out
}

/// Block formation on background `bins` plus an optional SU transaction in
/// `su_bin`. Yields `(bins after, probability, su included)`.
fn drain(bins: &[usize], su_bin: Option<usize>, n_add: usize) -> Vec<(Vec<usize>, f64, bool)> {
    let mut next = bins.to_vec();
    let occupancy = bins.iter().sum::<usize>() + usize::from(su_bin.is_some());
    let mut remaining = n_add.min(occupancy);
    // (members, take) in the SU's bin when partially drained
    let mut split: Option<(usize, usize)> = None;
    let mut su_taken = false;
    for bin in (0..next.len()).rev() {
        if remaining == 0 {
            break;
        }
        let su_here = su_bin == Some(bin);
        let members = next[bin] + usize::from(su_here);
        let take = remaining.min(members);
        remaining -= take;
        if su_here {
            if take == members {
                su_taken = true;
                next[bin] -= take - 1;
            } else if take > 0 {
                split = Some((members, take));
            }
            continue;
        }
        next[bin] -= take;
    }
    match (su_bin, split) {
        (None, _) => vec![(next, 1.0, false)],
        (Some(_), None) if su_taken => vec![(next, 1.0, true)],
        (Some(b), None) => {
            next[b] += 1;
            vec![(next, 1.0, false)]
        }
        (Some(b), Some((members, take))) => {
            let p_in = take as f64 / members as f64;
            // included: take-1 background removed; excluded: take removed, SU demoted
            let mut with = next.clone();
            with[b] -= take - 1;
            let mut without = next;
            without[b] -= take;
            without[b] += 1;
            vec![(with, p_in, true), (without, 1.0 - p_in, false)]
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValueSolution {
    pub values: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub policy: Vec<usize>,
    pub iterations: usize,
}

/// Two action values closer than this count as tied.
pub const TIE_TOL: f64 = 1e-9;

/// Greedy index with ties (within [`TIE_TOL`]) broken to the lowest action.
pub fn argmax_tol(q: &[f64]) -> usize {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    q.iter().position(|&v| v >= best - TIE_TOL).unwrap_or(0)
}

/// Discounted value iteration until the sup-norm change drops below `tol`.
pub fn value_iteration(mdp: &SmallMdp, gamma: f64, tol: f64) -> ValueSolution {
    let n = mdp.len();
    let mut values = vec![0.0; n];
    let mut q = vec![vec![0.0; mdp.num_actions]; n];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut delta: f64 = 0.0;
        let mut next = vec![0.0; n];
        for s in 0..n {
            for a in 0..mdp.num_actions {
                let future: f64 = mdp.transitions[s][a].iter().map(|&(j, p)| p * values[j]).sum();
                q[s][a] = mdp.rewards[s][a] + gamma * future;
            }
            next[s] = q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((next[s] - values[s]).abs());
        }
        values = next;
        if delta < tol || iterations >= 1_000_000 {
            break;
        }
    }
    let policy = q.iter().map(|row| argmax_tol(row)).collect();
    ValueSolution { values, q, policy, iterations }
}

/// Long-run mean reward per slot of a stationary deterministic policy,
/// starting from the reset distribution.
pub fn average_reward(mdp: &SmallMdp, policy: &[usize]) -> f64 {
    let n = mdp.len();
    let mut x = vec![0.0; n];
    for &(i, p) in &mdp.initial {
        x[i] += p;
    }
    // the lazy chain has the same Cesaro limit and no periodicity
    for _ in 0..1_000_000 {
        let mut y = vec![0.0; n];
        for s in 0..n {
            if x[s] == 0.0 {
                continue;
            }
            y[s] += 0.5 * x[s];
            for &(j, p) in &mdp.transitions[s][policy[s]] {
                y[j] += 0.5 * x[s] * p;
            }
        }
        let change: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum();
        x = y;
        if change < 1e-14 {
            break;
        }
    }
    (0..n).map(|s| x[s] * mdp.rewards[s][policy[s]]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackParams;
    use crate::channel::ChannelConfig;

    fn tiny(channel: ChannelConfig) -> EnvConfig {
        EnvConfig {
            channel,
            mempool: MempoolConfig {
                capacity: 2,
                bins: 2,
                fee_min: 0.0,
                fee_max: 1.0,
                arrivals_min: 1,
                arrivals_max: 1,
                add_min: 1,
                add_max: 1,
            },
            attack: AttackParams { q: 0.02, n: 1 },
            reward: RewardParams { success: 2.0, channel_cost: 0.2 },
            slots: 100,
            history_len: 1,
        }
    }

    #[test]
    fn compositions_sum_to_one() {
        for n in 0..5 {
            for m in 1..4 {
                let total: f64 = compositions(n, m).iter().map(|c| c.1).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_are_stochastic() {
        let mdp = enumerate_small_mdp(&tiny(ChannelConfig::round_robin(2, 0.9))).unwrap();
        assert!(!mdp.is_empty());
        for s in 0..mdp.len() {
            for a in 0..mdp.num_actions {
                let total: f64 = mdp.transitions[s][a].iter().map(|t| t.1).sum();
                assert!((total - 1.0).abs() < 1e-9, "row ({s},{a}) sums to {total}");
            }
        }
        let init: f64 = mdp.initial.iter().map(|t| t.1).sum();
        assert!((init - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_channel_is_a_permutation() {
        let mdp = enumerate_small_mdp(&tiny(ChannelConfig::round_robin(2, 1.0))).unwrap();
        for s in 0..mdp.len() {
            let c = mdp.states[s].channel.unwrap();
            for a in 0..mdp.num_actions {
                for &(j, _) in &mdp.transitions[s][a] {
                    assert_eq!(mdp.states[j].channel.unwrap().0, (c.0 + 1) % 2);
                }
            }
        }
    }

    #[test]
    fn observed_model_requires_iid_channel() {
        assert!(enumerate_observed_mdp(&tiny(ChannelConfig::round_robin(2, 0.9))).is_err());
        let m = enumerate_observed_mdp(&tiny(ChannelConfig::round_robin(2, 0.5))).unwrap();
        assert!(m.states.iter().all(|s| s.channel.is_none()));
    }

    #[test]
    fn size_bound_rejects_large_configs() {
        let cfg = EnvConfig::default();
        match enumerate_small_mdp(&cfg) {
            Err(Error::StateSpaceTooLarge { size, .. }) => assert!(size > MAX_STATES),
            other => panic!("expected size error, got {other:?}"),
        }
    }

    #[test]
    fn drain_splits_partial_bin() {
        let outs = drain(&[0, 5], Some(1), 3);
        assert_eq!(outs.len(), 2);
        assert_eq!(outs[0], (vec![0, 3], 0.5, true));
        assert_eq!(outs[1], (vec![0, 3], 0.5, false));
        assert_eq!(drain(&[0, 3], Some(1), 4), vec![(vec![0, 0], 1.0, true)]);
        assert_eq!(drain(&[0, 2], Some(0), 2), vec![(vec![1, 0], 1.0, false)]);
    }

    #[test]
    fn value_iteration_on_chain() {
        let mdp = enumerate_small_mdp(&tiny(ChannelConfig::round_robin(2, 1.0))).unwrap();
        let sol = value_iteration(&mdp, 0.9, 1e-12);
        // Bellman residual of the returned values
        for s in 0..mdp.len() {
            let best = (0..mdp.num_actions)
                .map(|a| {
                    mdp.rewards[s][a] + 0.9 * mdp.transitions[s][a].iter().map(|&(j, p)| p * sol.values[j]).sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((best - sol.values[s]).abs() < 1e-9);
        }
        // with a known, deterministic channel the optimal action never senses a bad channel
        for (s, st) in mdp.states.iter().enumerate() {
            let a = sol.policy[s];
            if a != 0 {
                assert_eq!(a - 1, st.channel.unwrap().0);
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_tol(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax_tol(&[0.1, 0.9, 0.3]), 1);
    }
}
