//! Training runs, sweeps, learning-curve CSVs and convergence detection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::agents::{run_episode, Agent, DdqnAgent, EpisodeMetrics, EpsilonSchedule, QLearner, Transition};
use crate::env::{EnvState, Environment};
use crate::rng::derive;
use crate::{Error, Result};

use super::config::{AgentKind, ExperimentConfig};

/// Printed into every summary so readers know what "converged" means.
pub const CONVERGENCE_RULE: &str = "first episode whose trailing-window mean reward is within 2% of the \
final-window mean; falls back to the episode count (flagged) if no earlier episode qualifies";

const CONVERGENCE_TOL: f64 = 0.02;

/// Either learner behind one interface.
#[derive(Debug, Clone)]
pub enum TrainedAgent {
    Ql(QLearner),
    Ddqn(Box<DdqnAgent>),
}

impl TrainedAgent {
    pub fn build(cfg: &ExperimentConfig, env: &Environment, seed: u64) -> Result<Self> {
        Ok(match cfg.agent.kind {
            AgentKind::Ql => TrainedAgent::Ql(QLearner::new(env.num_actions(), cfg.agent.lambda, cfg.agent.gamma, seed)),
            AgentKind::Ddqn => {
                TrainedAgent::Ddqn(Box::new(DdqnAgent::new(env, &cfg.hidden, cfg.adam, cfg.agent.ddqn(), seed)?))
            }
        })
    }

    /// Drops the replay memory, keeping only what greedy play needs.
    pub fn release_replay(&mut self) {
        if let TrainedAgent::Ddqn(agent) = self {
            agent.replay = crate::agents::replay::ReplayMemory::new(agent.replay.capacity());
        }
    }
}

impl Agent for TrainedAgent {
    fn act(&mut self, env: &Environment, state: &EnvState, epsilon: f64) -> Result<usize> {
        match self {
            TrainedAgent::Ql(a) => a.act(env, state, epsilon),
            TrainedAgent::Ddqn(a) => a.act(env, state, epsilon),
        }
    }

    fn greedy(&self, env: &Environment, state: &EnvState) -> Result<usize> {
        match self {
            TrainedAgent::Ql(a) => a.greedy(env, state),
            TrainedAgent::Ddqn(a) => a.greedy(env, state),
        }
    }

    fn learn(&mut self, env: &Environment, t: Transition<'_>) -> Result<()> {
        match self {
            TrainedAgent::Ql(a) => a.learn(env, t),
            TrainedAgent::Ddqn(a) => a.learn(env, t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    /// 1-based episode count at which the run is deemed converged.
    pub episode: usize,
    /// Mean reward over the final window.
    pub reward: f64,
    /// No episode before the last qualified.
    pub fallback: bool,
}

/// Applies the trailing-window rule to a reward series. The window is
/// clamped to the series length.
pub fn detect_convergence(rewards: &[f64], window: usize) -> Convergence {
    let n = rewards.len();
    assert!(n > 0, "empty reward series");
    let w = window.clamp(1, n);
    let trailing = trailing_means(rewards, w);
    let target = trailing[n - 1];
    let tol = CONVERGENCE_TOL * target.abs();
    let hit = (w - 1..n - 1).find(|&e| (trailing[e] - target).abs() <= tol);
    match hit {
        Some(e) => Convergence { episode: e + 1, reward: target, fallback: false },
        None => Convergence { episode: n, reward: target, fallback: true },
    }
}

/// `out[e]` is the mean of `xs[e+1-w ..= e]`, or of `xs[..=e]` while fewer
/// than `w` values are available.
pub fn trailing_means(xs: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        sum += x;
        if i >= w {
            sum -= xs[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

#[derive(Debug, Clone)]
pub struct ReplicateRun {
    pub replicate: usize,
    pub metrics: Vec<EpisodeMetrics>,
    pub convergence: Convergence,
    pub agent: TrainedAgent,
}

impl ReplicateRun {
    pub fn rewards(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.total_reward).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<ReplicateRun>,
    pub files: Vec<PathBuf>,
}

impl ExperimentResult {
    /// Replicate mean and standard error of the converged reward.
    pub fn converged_reward(&self) -> (f64, f64) {
        mean_and_stderr(&self.runs.iter().map(|r| r.convergence.reward).collect::<Vec<_>>())
    }

    pub fn mean_convergence_episode(&self) -> f64 {
        self.runs.iter().map(|r| r.convergence.episode as f64).sum::<f64>() / self.runs.len() as f64
    }
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Seed for replicate `r`, from which the agent and episode seeds derive.
pub fn replicate_seed(base: u64, r: usize) -> u64 {
    derive(base, &[r as u64])
}

/// Trains one replicate.
pub fn train_replicate(
    cfg: &ExperimentConfig,
    replicate: usize,
    on_episode: &mut dyn FnMut(usize, &EpisodeMetrics),
) -> Result<ReplicateRun> {
    let seed = replicate_seed(cfg.seed, replicate);
    let mut env = Environment::new(cfg.env_config()?)?;
    let mut agent = TrainedAgent::build(cfg, &env, derive(seed, &[0]))?;
    let schedule = EpsilonSchedule::for_run(cfg.episodes, cfg.agent.eps_decay_frac);
    let mut metrics = Vec::with_capacity(cfg.episodes);
    for ep in 0..cfg.episodes {
        let m = run_episode(&mut agent, &mut env, &schedule, ep, derive(seed, &[1, ep as u64]))?;
        on_episode(replicate, &m);
        metrics.push(m);
    }
    agent.release_replay();
    let rewards: Vec<f64> = metrics.iter().map(|m| m.total_reward).collect();
    Ok(ReplicateRun { replicate, convergence: detect_convergence(&rewards, cfg.window), metrics, agent })
}

/// Trains every replicate and, given `out_dir`, writes one CSV per
/// replicate plus the replicate-mean curve.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentResult> {
    run_experiment_with(cfg, out_dir, &mut |_, _| {})
}

pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    on_episode: &mut dyn FnMut(usize, &EpisodeMetrics),
) -> Result<ExperimentResult> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut runs = Vec::with_capacity(cfg.replicates);
    for r in 0..cfg.replicates {
        runs.push(train_replicate(cfg, r, on_episode)?);
    }
    let mut files = Vec::new();
    if let Some(dir) = out_dir {
        let kind = cfg.agent.kind.as_str();
        for run in &runs {
            let path = dir.join(format!("{kind}_rep{}.csv", run.replicate));
            fs::write(&path, replicate_csv(cfg, run))?;
            files.push(path);
            if let TrainedAgent::Ddqn(agent) = &run.agent {
                let ckpt = dir.join(format!("{kind}_rep{}.mlp", run.replicate));
                agent.online.save(&ckpt)?;
                files.push(ckpt);
            }
        }
        let path = dir.join(format!("{kind}_mean.csv"));
        fs::write(&path, aggregate_csv(cfg, &runs))?;
        files.push(path);
    }
    Ok(ExperimentResult { runs, files })
}

fn metadata(cfg: &ExperimentConfig, extra: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in cfg.entries().into_iter().chain(extra.iter().map(|(k, v)| (*k, v.clone()))) {
        writeln!(out, "# {k}={v}").expect("String write");
    }
    out
}

pub const EPISODE_HEADER: &str =
    "episode,total_reward,successes,no_transmit,bad_channel,rejected,not_included,attacked,epsilon";

/// Per-episode rows. Wall time is left out so the file depends only on
/// the configuration and seed.
pub fn replicate_csv(cfg: &ExperimentConfig, run: &ReplicateRun) -> String {
    let c = run.convergence;
    let mut out = metadata(
        cfg,
        &[
            ("replicate", run.replicate.to_string()),
            ("convergence_episode", c.episode.to_string()),
            ("convergence_fallback", c.fallback.to_string()),
            ("converged_reward", c.reward.to_string()),
            ("convergence_rule", CONVERGENCE_RULE.to_string()),
        ],
    );
    writeln!(out, "{EPISODE_HEADER}").expect("String write");
    for m in &run.metrics {
        let f = m.failures;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            m.episode, m.total_reward, m.successes, m.no_transmit, f.bad_channel, f.rejected, f.not_included, f.attacked, m.epsilon
        )
        .expect("String write");
    }
    out
}

/// Replicate mean, its standard error, and the trailing-window smoothed mean.
pub fn aggregate_csv(cfg: &ExperimentConfig, runs: &[ReplicateRun]) -> String {
    let n = runs.first().map_or(0, |r| r.metrics.len());
    let stats: Vec<(f64, f64)> = (0..n)
        .map(|e| mean_and_stderr(&runs.iter().map(|r| r.metrics[e].total_reward).collect::<Vec<_>>()))
        .collect();
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let smooth = trailing_means(&means, cfg.window);
    let mut out = metadata(
        cfg,
        &[("replicates_aggregated", runs.len().to_string()), ("smoothing", format!("trailing mean, window {}", cfg.window))],
    );
    writeln!(out, "episode,mean_reward,stderr,smoothed_reward").expect("String write");
    for (e, ((m, se), s)) in stats.iter().zip(&smooth).enumerate() {
        writeln!(out, "{e},{m},{se},{s}").expect("String write");
    }
    out
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub converged_mean: f64,
    pub converged_stderr: f64,
    pub mean_convergence_episode: f64,
    pub fallbacks: usize,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub key: String,
    pub rows: Vec<SweepRow>,
    pub files: Vec<PathBuf>,
}

/// One experiment per value of `key`. With `out_dir`, each value's curves
/// go to `<out_dir>/<key>=<value>/` and the summary to
/// `<out_dir>/sweep_<key>.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, key: &str, values: &[String], out_dir: Option<&Path>) -> Result<SweepResult> {
    run_sweep_with(cfg, key, values, out_dir, &mut |_, _| {})
}

pub fn run_sweep_with(
    cfg: &ExperimentConfig,
    key: &str,
    values: &[String],
    out_dir: Option<&Path>,
    on_episode: &mut dyn FnMut(usize, &EpisodeMetrics),
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::config(key, "sweep needs at least one value"));
    }
    let mut rows = Vec::new();
    let mut files = Vec::new();
    for v in values {
        let mut point = cfg.clone();
        point.set(key, v)?;
        point.validate()?;
        let dir = out_dir.map(|d| d.join(format!("{key}={v}")));
        let result = run_experiment_with(&point, dir.as_deref(), on_episode)?;
        let (mean, se) = result.converged_reward();
        rows.push(SweepRow {
            value: v.clone(),
            converged_mean: mean,
            converged_stderr: se,
            mean_convergence_episode: result.mean_convergence_episode(),
            fallbacks: result.runs.iter().filter(|r| r.convergence.fallback).count(),
        });
        files.extend(result.files);
    }
    let sweep = SweepResult { key: key.to_string(), rows, files };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("sweep_{key}.csv"));
        fs::write(&path, summary_csv(cfg, &sweep))?;
        let mut sweep = sweep;
        sweep.files.push(path);
        return Ok(sweep);
    }
    Ok(sweep)
}

pub fn summary_csv(cfg: &ExperimentConfig, sweep: &SweepResult) -> String {
    let mut out = metadata(
        cfg,
        &[("sweep_key", sweep.key.clone()), ("convergence_rule", CONVERGENCE_RULE.to_string())],
    );
    writeln!(out, "value,converged_mean_reward,converged_stderr,mean_convergence_episode,fallbacks").expect("String write");
    for r in &sweep.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.value, r.converged_mean, r.converged_stderr, r.mean_convergence_episode, r.fallbacks
        )
        .expect("String write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_means_window() {
        assert_eq!(trailing_means(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.0, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn converges_after_ramp() {
        let mut r: Vec<f64> = (0..100).map(|i| i as f64).collect();
        r.extend(std::iter::repeat(100.0).take(200));
        let c = detect_convergence(&r, 10);
        assert!(!c.fallback);
        assert_eq!(c.reward, 100.0);
        // window 95..=104 is the first with mean >= 98
        assert_eq!(c.episode, 105);
    }

    #[test]
    fn flags_fallback_when_never_close() {
        let r: Vec<f64> = (0..50).map(|i| (i * i) as f64).collect();
        let c = detect_convergence(&r, 5);
        assert!(c.fallback);
        assert_eq!(c.episode, 50);
    }

    #[test]
    fn single_episode_is_fallback() {
        let c = detect_convergence(&[3.0], 100);
        assert_eq!((c.episode, c.fallback, c.reward), (1, true, 3.0));
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_and_stderr(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, se) = mean_and_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-12);
    }
}
