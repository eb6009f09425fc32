//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; later assignments override earlier ones.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::agents::DdqnConfig;
use crate::channel::{load_matrix, ChannelMode};
use crate::env::EnvConfig;
use crate::nn::AdamConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Ql,
    Ddqn,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Ql => "ql",
            AgentKind::Ddqn => "ddqn",
        }
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ql" => Ok(AgentKind::Ql),
            "ddqn" => Ok(AgentKind::Ddqn),
            other => Err(format!("unknown agent kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub gamma: f64,
    /// Tabular learning rate.
    pub lambda: f64,
    pub batch: usize,
    pub replay_cap: usize,
    pub n_target: u64,
    pub warmup: usize,
    /// Fraction of the run over which exploration decays to zero.
    pub eps_decay_frac: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        let d = DdqnConfig::default();
        AgentConfig {
            kind: AgentKind::Ddqn,
            gamma: d.gamma,
            lambda: 0.1,
            batch: d.batch,
            replay_cap: d.replay_cap,
            n_target: d.n_target,
            warmup: d.warmup,
            eps_decay_frac: 0.8,
        }
    }
}

impl AgentConfig {
    pub fn ddqn(&self) -> DdqnConfig {
        DdqnConfig {
            n_target: self.n_target,
            batch: self.batch,
            replay_cap: self.replay_cap,
            gamma: self.gamma,
            warmup: self.warmup,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    /// Source of the explicit channel matrix, loaded by [`Self::env_config`].
    pub matrix_path: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
    pub agent: AgentConfig,
    pub episodes: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Trailing window for smoothing and convergence detection.
    pub window: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvConfig::default(),
            matrix_path: None,
            hidden: vec![64, 64],
            adam: AdamConfig::default(),
            agent: AgentConfig::default(),
            episodes: 5000,
            replicates: 5,
            seed: 0,
            window: 100,
            out_dir: None,
        }
    }
}

/// Every recognised key, in serialisation order.
pub const KEYS: &[&str] = &[
    "channels.K",
    "channels.p_c",
    "channels.mode",
    "channels.matrix_path",
    "mempool.D_max",
    "mempool.M",
    "mempool.fee_min",
    "mempool.fee_max",
    "mempool.arrivals_min",
    "mempool.arrivals_max",
    "mempool.add_min",
    "mempool.add_max",
    "attack.q",
    "attack.n",
    "env.R_success",
    "env.C_c",
    "env.T_slots",
    "env.L",
    "nn.hidden",
    "nn.alpha",
    "nn.beta1",
    "nn.beta2",
    "agent.kind",
    "agent.gamma",
    "agent.lambda",
    "agent.batch",
    "agent.replay_cap",
    "agent.n_target",
    "agent.warmup",
    "agent.eps_decay_frac",
    "experiment.episodes",
    "experiment.replicates",
    "experiment.seed",
    "experiment.window",
    "experiment.out_dir",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

impl ExperimentConfig {
    /// Parses configuration text on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. A relative `channels.matrix_path` is taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(mp), Some(dir)) = (&cfg.matrix_path, path.parent()) {
            if mp.is_relative() {
                cfg.matrix_path = Some(dir.join(mp));
            }
        }
        Ok(cfg)
    }

    /// Assigns one key. Does not validate cross-key constraints.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let env = &mut self.env;
        let mp = &mut env.mempool;
        let ag = &mut self.agent;
        match key {
            "channels.K" => env.channel.channels = parse_value(key, value)?,
            "channels.p_c" => env.channel.p_switch = parse_value(key, value)?,
            "channels.mode" => env.channel.mode = parse_value::<ChannelMode>(key, value)?,
            "channels.matrix_path" => {
                self.matrix_path = if value.is_empty() { None } else { Some(PathBuf::from(value)) };
            }
            "mempool.D_max" => mp.capacity = parse_value(key, value)?,
            "mempool.M" => mp.bins = parse_value(key, value)?,
            "mempool.fee_min" => mp.fee_min = parse_value(key, value)?,
            "mempool.fee_max" => mp.fee_max = parse_value(key, value)?,
            "mempool.arrivals_min" => mp.arrivals_min = parse_value(key, value)?,
            "mempool.arrivals_max" => mp.arrivals_max = parse_value(key, value)?,
            "mempool.add_min" => mp.add_min = parse_value(key, value)?,
            "mempool.add_max" => mp.add_max = parse_value(key, value)?,
            "attack.q" => env.attack.q = parse_value(key, value)?,
            "attack.n" => env.attack.n = parse_value(key, value)?,
            "env.R_success" => env.reward.success = parse_value(key, value)?,
            "env.C_c" => env.reward.channel_cost = parse_value(key, value)?,
            "env.T_slots" => env.slots = parse_value(key, value)?,
            "env.L" => env.history_len = parse_value(key, value)?,
            "nn.hidden" => self.hidden = parse_list(key, value)?,
            "nn.alpha" => self.adam.alpha = parse_value(key, value)?,
            "nn.beta1" => self.adam.beta1 = parse_value(key, value)?,
            "nn.beta2" => self.adam.beta2 = parse_value(key, value)?,
            "agent.kind" => ag.kind = parse_value(key, value)?,
            "agent.gamma" => ag.gamma = parse_value(key, value)?,
            "agent.lambda" => ag.lambda = parse_value(key, value)?,
            "agent.batch" => ag.batch = parse_value(key, value)?,
            "agent.replay_cap" => ag.replay_cap = parse_value(key, value)?,
            "agent.n_target" => ag.n_target = parse_value(key, value)?,
            "agent.warmup" => ag.warmup = parse_value(key, value)?,
            "agent.eps_decay_frac" => ag.eps_decay_frac = parse_value(key, value)?,
            "experiment.episodes" => self.episodes = parse_value(key, value)?,
            "experiment.replicates" => self.replicates = parse_value(key, value)?,
            "experiment.seed" => self.seed = parse_value(key, value)?,
            "experiment.window" => self.window = parse_value(key, value)?,
            "experiment.out_dir" => {
                self.out_dir = if value.is_empty() { None } else { Some(PathBuf::from(value)) };
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Current value of `key` in the form [`Self::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        let env = &self.env;
        let mp = &env.mempool;
        let ag = &self.agent;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Ok(match key {
            "channels.K" => env.channel.channels.to_string(),
            "channels.p_c" => env.channel.p_switch.to_string(),
            "channels.mode" => env.channel.mode.as_str().to_string(),
            "channels.matrix_path" => path(&self.matrix_path),
            "mempool.D_max" => mp.capacity.to_string(),
            "mempool.M" => mp.bins.to_string(),
            "mempool.fee_min" => mp.fee_min.to_string(),
            "mempool.fee_max" => mp.fee_max.to_string(),
            "mempool.arrivals_min" => mp.arrivals_min.to_string(),
            "mempool.arrivals_max" => mp.arrivals_max.to_string(),
            "mempool.add_min" => mp.add_min.to_string(),
            "mempool.add_max" => mp.add_max.to_string(),
            "attack.q" => env.attack.q.to_string(),
            "attack.n" => env.attack.n.to_string(),
            "env.R_success" => env.reward.success.to_string(),
            "env.C_c" => env.reward.channel_cost.to_string(),
            "env.T_slots" => env.slots.to_string(),
            "env.L" => env.history_len.to_string(),
            "nn.hidden" => self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "nn.alpha" => self.adam.alpha.to_string(),
            "nn.beta1" => self.adam.beta1.to_string(),
            "nn.beta2" => self.adam.beta2.to_string(),
            "agent.kind" => ag.kind.as_str().to_string(),
            "agent.gamma" => ag.gamma.to_string(),
            "agent.lambda" => ag.lambda.to_string(),
            "agent.batch" => ag.batch.to_string(),
            "agent.replay_cap" => ag.replay_cap.to_string(),
            "agent.n_target" => ag.n_target.to_string(),
            "agent.warmup" => ag.warmup.to_string(),
            "agent.eps_decay_frac" => ag.eps_decay_frac.to_string(),
            "experiment.episodes" => self.episodes.to_string(),
            "experiment.replicates" => self.replicates.to_string(),
            "experiment.seed" => self.seed.to_string(),
            "experiment.window" => self.window.to_string(),
            "experiment.out_dir" => path(&self.out_dir),
            _ => return Err(Error::config(key, "unknown key")),
        })
    }

    /// `(key, value)` for every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|&k| (k, self.get(k).expect("KEYS lists only known keys"))).collect()
    }

    /// Text that [`Self::parse`] maps back to `self`. An in-memory channel
    /// matrix without a path is not representable.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").expect("writing to a String cannot fail");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.env.channel.mode == ChannelMode::ExplicitMatrix
            && self.matrix_path.is_none()
            && self.env.channel.matrix.is_none()
        {
            return Err(Error::config("channels.matrix_path", "required by explicit-matrix mode"));
        }
        self.env.validate()?;
        if self.env.channel.channels == 0 {
            return Err(Error::config("channels.K", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.env.channel.p_switch) {
            return Err(Error::config("channels.p_c", "must lie in [0, 1]"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("nn.hidden", "need at least one positive layer width"));
        }
        if !(self.adam.alpha > 0.0 && self.adam.alpha.is_finite()) {
            return Err(Error::config("nn.alpha", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) {
            return Err(Error::config("nn.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::config("nn.beta2", "must lie in [0, 1)"));
        }
        if !(self.agent.lambda > 0.0 && self.agent.lambda <= 1.0) {
            return Err(Error::config("agent.lambda", "must lie in (0, 1]"));
        }
        if !(self.agent.eps_decay_frac > 0.0 && self.agent.eps_decay_frac <= 1.0) {
            return Err(Error::config("agent.eps_decay_frac", "must lie in (0, 1]"));
        }
        self.agent.ddqn().validate()?;
        if self.episodes == 0 {
            return Err(Error::config("experiment.episodes", "must be at least 1"));
        }
        if self.replicates == 0 {
            return Err(Error::config("experiment.replicates", "must be at least 1"));
        }
        if self.window == 0 {
            return Err(Error::config("experiment.window", "must be at least 1"));
        }
        Ok(())
    }

    /// Environment configuration with any explicit matrix loaded from disk.
    pub fn env_config(&self) -> Result<EnvConfig> {
        let mut env = self.env.clone();
        if env.channel.mode == ChannelMode::ExplicitMatrix && env.channel.matrix.is_none() {
            let path = self
                .matrix_path
                .as_ref()
                .ok_or_else(|| Error::config("channels.matrix_path", "required by explicit-matrix mode"))?;
            env.channel.matrix = Some(load_matrix(path)?);
        }
        Ok(env)
    }
}
