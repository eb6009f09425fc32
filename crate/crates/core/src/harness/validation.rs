//! Oracle suites: each compares an implementation against an independent
//! computation and reports the measured discrepancy.

use std::fmt;

use rand::Rng;

use crate::agents::replay::{Experience, ReplayMemory};
use crate::agents::{Agent, EpsilonSchedule};
use crate::attack::{attack_probability, race_oracle, AttackParams};
use crate::channel::{ChannelConfig, ChannelJointState, ChannelModel};
use crate::env::{EncodedState, EnvConfig, Environment, RewardParams};
use crate::mdp::{enumerate_observed_mdp, enumerate_small_mdp, value_iteration, MdpState, SmallMdp, ValueSolution, TIE_TOL};
use crate::mempool::{MempoolConfig, MempoolState};
use crate::nn::Mlp;
use crate::rng::{derive, stream};
use crate::Result;

use super::config::{AgentKind, ExperimentConfig};
use super::experiment::{train_replicate, TrainedAgent};

pub const ATTACK_Q_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.25, 0.4];
pub const ATTACK_N_GRID: [u32; 3] = [1, 2, 6];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12} {}  {}", self.name, if self.passed { "PASS" } else { "FAIL" }, self.detail)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub suites: Vec<SuiteReport>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

pub type AttackFormula = fn(&AttackParams) -> f64;

#[derive(Debug, Clone)]
pub struct ValidationOptions {
    pub seed: u64,
    /// Formula checked by the attack suite.
    pub attack_formula: AttackFormula,
    pub attack_trials: u64,
    pub gradient_nets: usize,
    pub channel_steps: usize,
    pub invariant_steps: usize,
    pub rollout_slots: usize,
    pub tiny_training: TinyTraining,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            seed: 0,
            attack_formula: attack_probability,
            attack_trials: 1_000_000,
            gradient_nets: 20,
            channel_steps: 1_000_000,
            invariant_steps: 1_000_000,
            rollout_slots: 1_000_000,
            tiny_training: TinyTraining::default(),
        }
    }
}

/// Runs every suite once, in a fixed order.
pub fn run_validation(opts: &ValidationOptions) -> Result<ValidationReport> {
    let suites = vec![
        attack_suite(opts.attack_formula, opts.attack_trials, opts.seed),
        gradient_suite(opts.gradient_nets, opts.seed)?,
        channel_suite(opts.channel_steps, opts.seed)?,
        mempool_suite(opts.invariant_steps, opts.seed),
        invariant_suite(opts.invariant_steps, opts.seed)?,
        mdp_suite(opts)?,
    ];
    Ok(ValidationReport { suites })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackCheck {
    pub params: AttackParams,
    pub formula: f64,
    pub estimate: f64,
    /// `|formula - estimate|` in binomial standard errors.
    pub z: f64,
}

/// Standard error floor of one trial's resolution, so a formula value of 0
/// or 1 does not demand an exact match.
fn binomial_se(p: f64, trials: u64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    (p * (1.0 - p) / trials as f64).sqrt().max(1.0 / trials as f64)
}

pub fn attack_checks(formula: AttackFormula, trials: u64, seed: u64) -> Vec<AttackCheck> {
    let mut out = Vec::new();
    for (i, &q) in ATTACK_Q_GRID.iter().enumerate() {
        for (j, &n) in ATTACK_N_GRID.iter().enumerate() {
            let params = AttackParams { q, n };
            let f = formula(&params);
            let est = race_oracle(&params, trials, &mut stream(derive(seed, &[i as u64, j as u64])));
            out.push(AttackCheck { params, formula: f, estimate: est, z: (f - est).abs() / binomial_se(f, trials) });
        }
    }
    out
}

pub fn attack_suite(formula: AttackFormula, trials: u64, seed: u64) -> SuiteReport {
    let checks = attack_checks(formula, trials, seed);
    let worst = checks.iter().map(|c| c.z).fold(0.0, f64::max);
    let majority_ok = [0.5, 0.6, 0.9, 1.0]
        .iter()
        .all(|&q| ATTACK_N_GRID.iter().all(|&n| formula(&AttackParams { q, n }) == 1.0));
    SuiteReport {
        name: "attack",
        passed: worst.is_finite() && worst <= 3.0 && majority_ok,
        detail: format!("max |formula - race| = {worst:.2} SE over {} points; q >= p gives 1: {majority_ok}", checks.len()),
    }
}

/// Squared-error loss used by the finite-difference check.
fn q_loss(net: &Mlp, x: &[f64], action: usize, target: f64) -> f64 {
    let q = net.forward(x).expect("shape checked by caller")[action];
    (target - q).powi(2)
}

/// Largest relative discrepancy between backpropagation and central
/// differences with step `delta`, over every parameter.
pub fn gradient_relative_error(net: &Mlp, x: &[f64], action: usize, target: f64, delta: f64) -> Result<f64> {
    let g = net.backward(x, action, target)?;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, numeric: f64| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    };
    for l in 0..net.weights().len() {
        for i in 0..net.weights()[l].len() {
            let orig = probe.weights()[l][i];
            probe.weights_mut()[l][i] = orig + delta;
            let plus = q_loss(&probe, x, action, target);
            probe.weights_mut()[l][i] = orig - delta;
            let minus = q_loss(&probe, x, action, target);
            probe.weights_mut()[l][i] = orig;
            check(g.weights[l][i], (plus - minus) / (2.0 * delta));
        }
        for i in 0..net.biases()[l].len() {
            let orig = probe.biases()[l][i];
            probe.biases_mut()[l][i] = orig + delta;
            let plus = q_loss(&probe, x, action, target);
            probe.biases_mut()[l][i] = orig - delta;
            let minus = q_loss(&probe, x, action, target);
            probe.biases_mut()[l][i] = orig;
            check(g.biases[l][i], (plus - minus) / (2.0 * delta));
        }
    }
    Ok(worst)
}

/// Central differences are only meaningful away from ReLU kinks; a step of
/// 1e-5 moves no pre-activation by more than this.
const KINK_MARGIN: f64 = 1e-3;

/// Smallest |pre-activation| over the hidden units for input `x`.
fn kink_margin(net: &Mlp, x: &[f64]) -> f64 {
    let depth = net.weights().len();
    let mut input = x.to_vec();
    let mut margin = f64::INFINITY;
    for l in 0..depth - 1 {
        let out = net.biases()[l].len();
        let mut z = net.biases()[l].clone();
        for (i, &xi) in input.iter().enumerate() {
            for (zj, w) in z.iter_mut().zip(&net.weights()[l][i * out..(i + 1) * out]) {
                *zj += xi * w;
            }
        }
        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        input = z.into_iter().map(|v| v.max(0.0)).collect();
    }
    margin
}

/// Worst relative error over `nets` random networks of random shape, with
/// random biases and inputs drawn away from ReLU kinks.
pub fn gradient_check(nets: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(derive(seed, &[7]));
    let mut worst: f64 = 0.0;
    for _ in 0..nets {
        let depth = rng.gen_range(1..=3);
        let mut sizes = vec![rng.gen_range(1..=12)];
        sizes.extend((0..depth).map(|_| rng.gen_range(1..=16)));
        sizes.push(rng.gen_range(1..=6));
        let mut net = Mlp::new(&sizes, &mut rng)?;
        let x = loop {
            for b in net.biases_mut().iter_mut().flatten() {
                *b = rng.gen_range(-0.5..0.5);
            }
            let x: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if kink_margin(&net, &x) > KINK_MARGIN {
                break x;
            }
        };
        let action = rng.gen_range(0..net.output_len());
        let target = rng.gen_range(-2.0..2.0);
        worst = worst.max(gradient_relative_error(&net, &x, action, target, 1e-5)?);
    }
    Ok(worst)
}

pub fn gradient_suite(nets: usize, seed: u64) -> Result<SuiteReport> {
    let worst = gradient_check(nets, seed)?;
    Ok(SuiteReport {
        name: "gradient",
        passed: worst < 1e-4,
        detail: format!("max relative error {worst:.2e} over {nets} networks (tolerance 1e-4)"),
    })
}

/// Largest gap between the solved stationary distribution and empirical
/// state frequencies over `steps` transitions.
pub fn stationary_gap(cfg: ChannelConfig, steps: usize, seed: u64) -> Result<f64> {
    let model = ChannelModel::new(cfg)?;
    let pi = model.stationary_distribution()?;
    let mut counts = vec![0usize; model.num_states()];
    let mut rng = stream(seed);
    let mut s = ChannelJointState(0);
    for _ in 0..steps {
        s = model.step(s, &mut rng);
        counts[s.0] += 1;
    }
    Ok(pi.iter().zip(&counts).map(|(p, &c)| (p - c as f64 / steps as f64).abs()).fold(0.0, f64::max))
}

pub fn channel_suite(steps: usize, seed: u64) -> Result<SuiteReport> {
    let rr = stationary_gap(ChannelConfig::round_robin(4, 0.9), steps, derive(seed, &[11]))?;
    let explicit = ChannelConfig::explicit(
        2,
        vec![
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.2, 0.5, 0.2, 0.1],
            vec![0.1, 0.1, 0.6, 0.2],
            vec![0.25, 0.25, 0.25, 0.25],
        ],
    );
    let ex = stationary_gap(explicit, steps, derive(seed, &[12]))?;
    let tol = 4.0 * (0.25 / steps as f64).sqrt() * 10.0;
    Ok(SuiteReport {
        name: "channel",
        passed: rr < tol && ex < tol,
        detail: format!("stationary vs empirical max gap: round-robin {rr:.4}, explicit {ex:.4} (tolerance {tol:.4})"),
    })
}

/// Randomised block formations checked for capacity and fee priority.
/// Returns the number of violations.
pub fn mempool_violations(blocks: usize, seed: u64) -> usize {
    let cfg = MempoolConfig { capacity: 12, bins: 4, ..MempoolConfig::default() };
    let mut rng = stream(derive(seed, &[13]));
    let mut pool = MempoolState::empty(&cfg);
    let mut violations = 0;
    for _ in 0..blocks {
        if rng.gen_bool(0.5) && pool.su_tx().is_none() {
            let fee = cfg.draw_fee(&mut rng);
            pool.submit_su_tx(fee, &cfg).expect("no SU transaction pending");
        }
        pool.inject_arrivals(&cfg, &mut rng);
        violations += usize::from(pool.occupancy() > cfg.capacity);
        let mut before = pool.bin_counts().to_vec();
        if let Some(tx) = pool.su_tx() {
            before[tx.bin] += 1;
        }
        let occupancy = pool.occupancy();
        let block = pool.form_block(&cfg, &mut rng);
        let after = pool.bin_counts();
        violations += usize::from(pool.su_tx().is_some());
        violations += usize::from(pool.occupancy() + block.added != occupancy);
        // a bin may only lose members once every higher bin is empty
        let removed: Vec<usize> = before.iter().zip(after).map(|(b, a)| b - a).collect();
        for bin in 0..removed.len() {
            if removed[bin] > 0 && after[bin + 1..].iter().any(|&c| c > 0) {
                violations += 1;
            }
        }
    }
    violations
}

pub fn mempool_suite(blocks: usize, seed: u64) -> SuiteReport {
    let v = mempool_violations(blocks, seed);
    SuiteReport { name: "mempool", passed: v == 0, detail: format!("{v} capacity/priority violations over {blocks} blocks") }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InvariantViolations {
    pub causal: usize,
    pub reward: usize,
    pub capacity: usize,
    pub determinism: usize,
    pub replay: usize,
    pub epsilon: usize,
}

impl InvariantViolations {
    pub fn total(&self) -> usize {
        self.causal + self.reward + self.capacity + self.determinism + self.replay + self.epsilon
    }
}

/// Drives two identically seeded environments with random actions for
/// `steps` slots, and exercises the replay ring and exploration schedules.
pub fn invariant_violations(steps: usize, seed: u64) -> Result<InvariantViolations> {
    let mut v = InvariantViolations::default();
    let cfg = EnvConfig {
        mempool: MempoolConfig { capacity: 10, ..MempoolConfig::default() },
        attack: AttackParams { q: 0.3, n: 1 },
        slots: 500,
        ..EnvConfig::default()
    };
    let (lo, hi) = cfg.reward_bounds();
    let mut a = Environment::new(cfg.clone())?;
    let mut b = Environment::new(cfg.clone())?;
    let mut rng = stream(derive(seed, &[21]));
    let mut episode = 0u64;
    a.reset(derive(seed, &[22, episode]));
    b.reset(derive(seed, &[22, episode]));
    for _ in 0..steps {
        let action = rng.gen_range(0..a.num_actions());
        let ra = a.step(action)?;
        let rb = b.step(action)?;
        v.causal += usize::from(!ra.info.is_causal());
        v.reward += usize::from(!(lo..=hi).contains(&ra.reward));
        v.reward += usize::from(cfg.reward.reward(ra.info.outcome(), ra.info.fee_paid) != ra.reward);
        v.capacity += usize::from(ra.next_state.mempool.occupancy() > cfg.mempool.capacity);
        v.determinism += usize::from(ra != rb);
        if ra.terminal {
            episode += 1;
            a.reset(derive(seed, &[22, episode]));
            b.reset(derive(seed, &[22, episode]));
        }
    }

    let cap = 1000;
    let mut replay = ReplayMemory::new(cap);
    let blank = EncodedState::default();
    for i in 0..steps {
        replay.push(Experience {
            state: blank.clone(),
            action: 0,
            reward: i as f64,
            next_state: blank.clone(),
            terminal: false,
        });
        if i % 997 == 0 || i + 1 == steps {
            let kept = replay.len();
            let first = (i + 1 - kept) as f64;
            let ok = kept == (i + 1).min(cap)
                && replay.iter_oldest_first().enumerate().all(|(k, e)| e.reward == first + k as f64);
            v.replay += usize::from(!ok);
        }
    }

    for episodes in [1usize, 2, 7, 100, 5000] {
        for frac in [0.1, 0.5, 0.8, 1.0] {
            let s = EpsilonSchedule::for_run(episodes, frac);
            let mut prev = f64::INFINITY;
            for e in 0..episodes + 5 {
                let eps = s.value(e);
                v.epsilon += usize::from(eps > prev || !(s.end..=s.start).contains(&eps));
                prev = eps;
            }
            v.epsilon += usize::from(s.value(s.horizon) != s.end);
        }
    }
    Ok(v)
}

pub fn invariant_suite(steps: usize, seed: u64) -> Result<SuiteReport> {
    let v = invariant_violations(steps, seed)?;
    Ok(SuiteReport { name: "invariants", passed: v.total() == 0, detail: format!("{v:?} over {steps} steps") })
}

/// Enumerable configuration with an i.i.d. single channel that is good
/// with probability 0.7. Every observable state recurs under every policy.
pub fn tiny_env_config() -> EnvConfig {
    EnvConfig {
        channel: ChannelConfig::explicit(1, vec![vec![0.3, 0.7]; 2]),
        mempool: MempoolConfig {
            capacity: 2,
            bins: 2,
            fee_min: 0.0,
            fee_max: 1.0,
            arrivals_min: 1,
            arrivals_max: 2,
            add_min: 0,
            add_max: 2,
        },
        attack: AttackParams { q: 0.02, n: 1 },
        reward: RewardParams { success: 3.0, channel_cost: 0.2 },
        slots: 200,
        history_len: 1,
    }
}

/// Training budget for the agents compared against value iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyTraining {
    pub ql_episodes: usize,
    pub ql_lambda: f64,
    pub ddqn_episodes: usize,
    pub ddqn_alpha: f64,
    pub ddqn_batch: usize,
    pub hidden: Vec<usize>,
}

impl Default for TinyTraining {
    fn default() -> Self {
        TinyTraining {
            ql_episodes: 20_000,
            ql_lambda: 0.005,
            ddqn_episodes: 600,
            ddqn_alpha: 3e-4,
            ddqn_batch: 32,
            hidden: vec![32, 32],
        }
    }
}

pub fn tiny_experiment(kind: AgentKind, training: &TinyTraining, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { env: tiny_env_config(), seed, replicates: 1, window: 20, ..Default::default() };
    cfg.agent.kind = kind;
    cfg.agent.lambda = training.ql_lambda;
    cfg.hidden = training.hidden.clone();
    cfg.adam.alpha = training.ddqn_alpha;
    cfg.agent.batch = training.ddqn_batch;
    cfg.episodes = match kind {
        AgentKind::Ql => training.ql_episodes,
        AgentKind::Ddqn => training.ddqn_episodes,
    };
    cfg
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyAgreement {
    pub states: usize,
    pub matched: usize,
    /// `(state index, agent action, optimal action)` for each disagreement.
    pub mismatches: Vec<(usize, usize, usize)>,
}

impl PolicyAgreement {
    pub fn fraction(&self) -> f64 {
        self.matched as f64 / self.states as f64
    }
}

/// An agent's greedy action agrees with value iteration when it attains
/// the optimal action value up to the tie tolerance.
pub fn policy_agreement(
    agent: &dyn Agent,
    env: &Environment,
    mdp: &SmallMdp,
    solution: &ValueSolution,
) -> Result<PolicyAgreement> {
    let mut matched = 0;
    let mut mismatches = Vec::new();
    for (s, state) in mdp.states.iter().enumerate() {
        let a = agent.greedy(env, &state.env_state())?;
        let best = solution.q[s][solution.policy[s]];
        if solution.q[s][a] >= best - TIE_TOL {
            matched += 1;
        } else {
            mismatches.push((s, a, solution.policy[s]));
        }
    }
    Ok(PolicyAgreement { states: mdp.len(), matched, mismatches })
}

/// Trains one agent on the tiny configuration and compares its greedy
/// policy with the optimal policy of the observed model.
pub fn tiny_agreement(kind: AgentKind, training: &TinyTraining, seed: u64) -> Result<PolicyAgreement> {
    let cfg = tiny_experiment(kind, training, seed);
    let env_cfg = cfg.env_config()?;
    let mdp = enumerate_observed_mdp(&env_cfg)?;
    let solution = value_iteration(&mdp, cfg.agent.gamma, 1e-12);
    let run = train_replicate(&cfg, 0, &mut |_, _| {})?;
    let env = Environment::new(env_cfg)?;
    let agent: &TrainedAgent = &run.agent;
    policy_agreement(agent, &env, &mdp, &solution)
}

/// Mean reward per slot of `policy` simulated for `slots` slots in one
/// uninterrupted episode. The policy sees the hidden channel state.
pub fn rollout_average_reward(cfg: &EnvConfig, mdp: &SmallMdp, policy: &[usize], slots: usize, seed: u64) -> Result<f64> {
    let mut env = Environment::new(EnvConfig { slots, ..cfg.clone() })?;
    let mut state = env.reset(seed).clone();
    let mut total = 0.0;
    for _ in 0..slots {
        let key = MdpState {
            channel: Some(env.channel_state()),
            history: state.history.clone(),
            bins: state.mempool.bin_counts().to_vec(),
        };
        let s = mdp
            .index_of(&key)
            .ok_or_else(|| crate::Error::Invariant(format!("rollout reached unenumerated state {key:?}")))?;
        let step = env.step(policy[s])?;
        total += step.reward;
        state = step.next_state;
    }
    Ok(total / slots as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutComparison {
    pub exact: f64,
    pub simulated: f64,
}

impl RolloutComparison {
    pub fn relative_error(&self) -> f64 {
        (self.simulated - self.exact).abs() / self.exact.abs()
    }
}

/// Average reward of the optimal full-model policy, solved exactly and
/// simulated.
pub fn tiny_rollout(slots: usize, seed: u64) -> Result<RolloutComparison> {
    let cfg = tiny_env_config();
    let mdp = enumerate_small_mdp(&cfg)?;
    let solution = value_iteration(&mdp, 0.9, 1e-12);
    let exact = crate::mdp::average_reward(&mdp, &solution.policy);
    let simulated = rollout_average_reward(&cfg, &mdp, &solution.policy, slots, seed)?;
    Ok(RolloutComparison { exact, simulated })
}

pub fn mdp_suite(opts: &ValidationOptions) -> Result<SuiteReport> {
    let rollout = tiny_rollout(opts.rollout_slots, derive(opts.seed, &[31]))?;
    let ql = tiny_agreement(AgentKind::Ql, &opts.tiny_training, derive(opts.seed, &[32]))?;
    let ddqn = tiny_agreement(AgentKind::Ddqn, &opts.tiny_training, derive(opts.seed, &[33]))?;
    let passed = rollout.relative_error() <= 0.01 && ql.mismatches.is_empty() && ddqn.fraction() >= 0.95;
    Ok(SuiteReport {
        name: "mdp",
        passed,
        detail: format!(
            "average reward exact {:.5} vs rollout {:.5} ({:.3}%); QL agrees on {}/{}; DDQN agrees on {}/{}",
            rollout.exact,
            rollout.simulated,
            100.0 * rollout.relative_error(),
            ql.matched,
            ql.states,
            ddqn.matched,
            ddqn.states
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(params: &AttackParams) -> f64 {
        // the series added instead of subtracted
        2.0 - attack_probability(params)
    }

    #[test]
    fn attack_suite_passes_and_catches_mutation() {
        assert!(attack_suite(attack_probability, 20_000, 1).passed);
        assert!(!attack_suite(flipped, 20_000, 1).passed);
    }

    #[test]
    fn gradient_check_holds_across_seeds() {
        for seed in 0..50 {
            assert!(gradient_check(20, seed).unwrap() < 1e-4, "seed {seed}");
        }
    }

    #[test]
    fn tiny_config_is_enumerable() {
        let cfg = tiny_env_config();
        let full = enumerate_small_mdp(&cfg).unwrap();
        let observed = enumerate_observed_mdp(&cfg).unwrap();
        assert!(observed.len() < full.len());
        assert_eq!(observed.len(), 18);
    }

    #[test]
    fn small_invariant_run_is_clean() {
        assert_eq!(invariant_violations(20_000, 3).unwrap().total(), 0);
        assert_eq!(mempool_violations(20_000, 3), 0);
    }
}
