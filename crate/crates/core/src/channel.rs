//! Primary-channel occupancy model.
//!
//! Channels are jointly described by a Markov chain. In round-robin mode
//! exactly one channel is good and the good index advances cyclically with
//! probability `p_switch`; the chain then has `K` reachable states. In
//! explicit-matrix mode the chain runs over all `2^K` occupancy words, bit
//! `k` set meaning channel `k` is good.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::rng::sample_weighted;
use crate::{Error, Result};

/// Largest `K` accepted in explicit-matrix mode (dense `2^K x 2^K` matrix).
pub const MAX_EXPLICIT_CHANNELS: usize = 10;

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    RoundRobin,
    ExplicitMatrix,
}

impl ChannelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelMode::RoundRobin => "round-robin",
            ChannelMode::ExplicitMatrix => "explicit-matrix",
        }
    }
}

impl std::str::FromStr for ChannelMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "round-robin" => Ok(ChannelMode::RoundRobin),
            "explicit-matrix" => Ok(ChannelMode::ExplicitMatrix),
            other => Err(format!("unknown channel mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    /// Number of channels `K`.
    pub channels: usize,
    /// Probability that the good channel advances each slot (round-robin).
    pub p_switch: f64,
    pub mode: ChannelMode,
    /// Row-stochastic matrix over joint occupancy words (explicit mode).
    pub matrix: Option<Vec<Vec<f64>>>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig { channels: 4, p_switch: 0.9, mode: ChannelMode::RoundRobin, matrix: None }
    }
}

impl ChannelConfig {
    pub fn round_robin(channels: usize, p_switch: f64) -> Self {
        ChannelConfig { channels, p_switch, mode: ChannelMode::RoundRobin, matrix: None }
    }

    pub fn explicit(channels: usize, matrix: Vec<Vec<f64>>) -> Self {
        ChannelConfig { channels, p_switch: 0.0, mode: ChannelMode::ExplicitMatrix, matrix: Some(matrix) }
    }

    /// Joint-state matrix that reproduces round-robin dynamics on the
    /// single-good words. Words without exactly one good channel jump to
    /// "channel 0 good".
    pub fn round_robin_equivalent_matrix(channels: usize, p_switch: f64) -> Vec<Vec<f64>> {
        let n = 1usize << channels;
        let mut m = vec![vec![0.0; n]; n];
        for (word, row) in m.iter_mut().enumerate() {
            if word.count_ones() == 1 {
                let good = word.trailing_zeros() as usize;
                let next = 1usize << ((good + 1) % channels);
                row[word] += 1.0 - p_switch;
                row[next] += p_switch;
            } else {
                row[1] = 1.0;
            }
        }
        m
    }
}

/// Hidden joint channel state: the good index in round-robin mode, the
/// occupancy word in explicit-matrix mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelJointState(pub usize);

/// A validated channel chain ready for simulation.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    cfg: ChannelConfig,
    /// Nonzero transition entries per state, ascending by target index.
    rows: Vec<Vec<(usize, f64)>>,
}

impl ChannelModel {
    pub fn new(cfg: ChannelConfig) -> Result<Self> {
        if cfg.channels == 0 {
            return Err(Error::config("channels.K", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&cfg.p_switch) {
            return Err(Error::config("channels.p_c", format!("{} not in [0, 1]", cfg.p_switch)));
        }
        let rows = match cfg.mode {
            ChannelMode::RoundRobin => {
                let k = cfg.channels;
                (0..k)
                    .map(|i| {
                        let mut dense = vec![0.0; k];
                        dense[i] += 1.0 - cfg.p_switch;
                        dense[(i + 1) % k] += cfg.p_switch;
                        sparse_row(&dense)
                    })
                    .collect()
            }
            ChannelMode::ExplicitMatrix => {
                if cfg.channels > MAX_EXPLICIT_CHANNELS {
                    return Err(Error::config(
                        "channels.K",
                        format!("explicit-matrix mode supports at most {MAX_EXPLICIT_CHANNELS} channels"),
                    ));
                }
                let matrix = cfg
                    .matrix
                    .as_ref()
                    .ok_or_else(|| Error::config("channels.matrix_path", "explicit-matrix mode needs a matrix"))?;
                let n = 1usize << cfg.channels;
                if matrix.len() != n {
                    return Err(Error::config(
                        "channels.matrix_path",
                        format!("expected {n} rows for K = {}, got {}", cfg.channels, matrix.len()),
                    ));
                }
                for (i, row) in matrix.iter().enumerate() {
                    if row.len() != n {
                        return Err(Error::config(
                            "channels.matrix_path",
                            format!("row {i} has {} entries, expected {n}", row.len()),
                        ));
                    }
                    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                        return Err(Error::config("channels.matrix_path", format!("row {i} has a negative entry")));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(Error::config("channels.matrix_path", format!("row {i} sums to {sum}")));
                    }
                }
                matrix.iter().map(|r| sparse_row(r)).collect()
            }
        };
        Ok(ChannelModel { cfg, rows })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn channels(&self) -> usize {
        self.cfg.channels
    }

    pub fn num_states(&self) -> usize {
        self.rows.len()
    }

    /// Transition entries out of `state`, ascending by target.
    pub fn row(&self, state: ChannelJointState) -> &[(usize, f64)] {
        &self.rows[state.0]
    }

    pub fn is_good(&self, state: ChannelJointState, channel: usize) -> bool {
        match self.cfg.mode {
            ChannelMode::RoundRobin => state.0 == channel,
            ChannelMode::ExplicitMatrix => (state.0 >> channel) & 1 == 1,
        }
    }

    /// Observation bit for `action`: 1 iff the selected channel `action - 1`
    /// is good. Action 0 senses nothing and yields 0.
    pub fn observe(&self, state: ChannelJointState, action: usize) -> u8 {
        if action == 0 || action > self.cfg.channels {
            return 0;
        }
        u8::from(self.is_good(state, action - 1))
    }

    /// Advances the chain one slot using a single uniform draw.
    pub fn step<R: Rng + ?Sized>(&self, state: ChannelJointState, rng: &mut R) -> ChannelJointState {
        ChannelJointState(sample_weighted(rng, &self.rows[state.0]))
    }

    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.num_states();
        self.rows
            .iter()
            .map(|row| {
                let mut dense = vec![0.0; n];
                for &(j, p) in row {
                    dense[j] += p;
                }
                dense
            })
            .collect()
    }

    /// Solves `pi P = pi`, `sum(pi) = 1` for an irreducible chain.
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        let n = self.num_states();
        check_irreducible(&self.rows)?;
        let p = self.transition_matrix();
        // (P^T - I) pi = 0 with the last equation replaced by normalisation
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(j, i)] = p[i][j];
            }
            a[(i, i)] -= 1.0;
        }
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = DVector::<f64>::zeros(n);
        b[n - 1] = 1.0;
        let pi = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Logic("singular stationary system for an irreducible chain".into()))?;
        let mut pi: Vec<f64> = pi.iter().map(|v| v.max(0.0)).collect();
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|v| *v /= total);
        Ok(pi)
    }
}

fn sparse_row(dense: &[f64]) -> Vec<(usize, f64)> {
    dense.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(j, p)| (j, *p)).collect()
}

fn reach(rows: &[Vec<(usize, f64)>], from: usize) -> Vec<bool> {
    let mut seen = vec![false; rows.len()];
    let mut queue = VecDeque::from([from]);
    seen[from] = true;
    while let Some(i) = queue.pop_front() {
        for &(j, _) in &rows[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

fn check_irreducible(rows: &[Vec<(usize, f64)>]) -> Result<()> {
    let n = rows.len();
    let unreachable_from = |from: usize| -> Vec<usize> {
        let seen = reach(rows, from);
        (0..n).filter(|&j| !seen[j]).collect()
    };
    let missing = unreachable_from(0);
    if !missing.is_empty() {
        return Err(Error::Reducible { from: 0, unreachable: missing });
    }
    // every state reaches 0 iff 0 is reachable from each state
    for from in 1..n {
        if !reach(rows, from)[0] {
            return Err(Error::Reducible { from, unreachable: unreachable_from(from) });
        }
    }
    Ok(())
}

/// Reads a whitespace-separated matrix, one row per line. Blank lines and
/// lines starting with `#` are skipped.
pub fn load_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    reason: format!("line {}: `{tok}`: {e}", lineno + 1),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// One `(action, observation)` pair of the channel history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Observation {
    pub action: usize,
    pub good: bool,
}

impl Observation {
    pub const SENTINEL: Observation = Observation { action: 0, good: false };

    pub fn new(action: usize, bit: u8) -> Self {
        Observation { action, good: bit == 1 }
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.action, u8::from(self.good))
    }
}

/// The last `L` observations, newest first. Always exactly `L` long.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObservationHistory {
    entries: VecDeque<Observation>,
}

impl ObservationHistory {
    /// A history of `len` sentinel pairs.
    pub fn new(len: usize) -> Self {
        ObservationHistory { entries: std::iter::repeat(Observation::SENTINEL).take(len).collect() }
    }

    pub fn from_entries(entries: impl IntoIterator<Item = Observation>) -> Self {
        ObservationHistory { entries: entries.into_iter().collect() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Prepends `(action, bit)` and drops the oldest entry.
    pub fn push(&mut self, action: usize, bit: u8) {
        if self.entries.is_empty() {
            return;
        }
        self.entries.pop_back();
        self.entries.push_front(Observation::new(action, bit));
    }

    pub fn pushed(&self, action: usize, bit: u8) -> Self {
        let mut next = self.clone();
        next.push(action, bit);
        next
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.entries.iter()
    }

    pub fn newest(&self) -> Option<&Observation> {
        self.entries.front()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn rr(k: usize, p: f64) -> ChannelModel {
        ChannelModel::new(ChannelConfig::round_robin(k, p)).unwrap()
    }

    #[test]
    fn zero_switch_probability_never_moves() {
        let m = rr(4, 0.0);
        let mut rng = stream(1);
        for _ in 0..1000 {
            assert_eq!(m.step(ChannelJointState(2), &mut rng), ChannelJointState(2));
        }
    }

    #[test]
    fn unit_switch_probability_always_advances() {
        let m = rr(4, 1.0);
        let mut rng = stream(2);
        for _ in 0..1000 {
            assert_eq!(m.step(ChannelJointState(2), &mut rng), ChannelJointState(3));
            assert_eq!(m.step(ChannelJointState(3), &mut rng), ChannelJointState(0));
        }
    }

    #[test]
    fn single_channel_stays_good() {
        let m = rr(1, 0.9);
        let mut rng = stream(3);
        assert_eq!(m.step(ChannelJointState(0), &mut rng), ChannelJointState(0));
        assert_eq!(m.observe(ChannelJointState(0), 1), 1);
    }

    #[test]
    fn switch_frequency_matches_p_c() {
        let m = rr(4, 0.9);
        let mut rng = stream(4);
        let mut state = ChannelJointState(0);
        let n = 100_000;
        let mut switches = 0;
        for _ in 0..n {
            let next = m.step(state, &mut rng);
            if next != state {
                switches += 1;
            }
            state = next;
        }
        let freq = switches as f64 / n as f64;
        assert!((freq - 0.9).abs() < 0.01, "switch frequency {freq}");
    }

    #[test]
    fn observation_bits() {
        let m = rr(4, 0.9);
        let s = ChannelJointState(2);
        assert_eq!(m.observe(s, 3), 1);
        assert_eq!(m.observe(s, 1), 0);
        assert_eq!(m.observe(s, 0), 0);
    }

    #[test]
    fn explicit_observation_reads_bits() {
        let m = ChannelModel::new(ChannelConfig::explicit(2, vec![vec![0.25; 4]; 4])).unwrap();
        let s = ChannelJointState(0b10);
        assert_eq!(m.observe(s, 1), 0);
        assert_eq!(m.observe(s, 2), 1);
    }

    #[test]
    fn history_push_cases() {
        let mut h = ObservationHistory::new(4);
        h.push(2, 1);
        let got: Vec<_> = h.iter().copied().collect();
        assert_eq!(got[0], Observation::new(2, 1));
        assert!(got[1..].iter().all(|o| *o == Observation::SENTINEL));

        let h = ObservationHistory::from_entries([Observation::new(3, 0)]).pushed(1, 1);
        assert_eq!(h.iter().copied().collect::<Vec<_>>(), vec![Observation::new(1, 1)]);

        let h = ObservationHistory::from_entries([Observation::new(1, 1), Observation::new(2, 0)]).pushed(4, 0);
        assert_eq!(h.iter().copied().collect::<Vec<_>>(), vec![Observation::new(4, 0), Observation::new(1, 1)]);
    }

    #[test]
    fn stationary_round_robin_is_uniform() {
        let pi = rr(4, 0.9).stationary_distribution().unwrap();
        for p in &pi {
            assert!((p - 0.25).abs() < 1e-12);
        }
        // periodic chain still solves
        let pi = rr(3, 1.0).stationary_distribution().unwrap();
        assert!(pi.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn stationary_matches_power_iteration() {
        let matrix = vec![
            vec![0.5, 0.2, 0.2, 0.1],
            vec![0.1, 0.6, 0.1, 0.2],
            vec![0.3, 0.3, 0.3, 0.1],
            vec![0.0, 0.25, 0.25, 0.5],
        ];
        let m = ChannelModel::new(ChannelConfig::explicit(2, matrix.clone())).unwrap();
        let pi = m.stationary_distribution().unwrap();
        let mut x = vec![1.0, 0.0, 0.0, 0.0];
        for _ in 0..10_000 {
            let mut y = vec![0.0; 4];
            for i in 0..4 {
                for j in 0..4 {
                    y[j] += x[i] * matrix[i][j];
                }
            }
            x = y;
        }
        for (a, b) in pi.iter().zip(&x) {
            assert!((a - b).abs() < 1e-10, "{pi:?} vs {x:?}");
        }
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identity_chain_is_reducible() {
        match rr(4, 0.0).stationary_distribution() {
            Err(Error::Reducible { from, unreachable }) => {
                assert_eq!(from, 0);
                assert_eq!(unreachable, vec![1, 2, 3]);
            }
            other => panic!("expected reducible error, got {other:?}"),
        }
    }

    #[test]
    fn two_state_symmetric_chain() {
        let m = ChannelModel::new(ChannelConfig::explicit(1, vec![vec![0.5, 0.5], vec![0.5, 0.5]])).unwrap();
        let pi = m.stationary_distribution().unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-12 && (pi[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let err = ChannelModel::new(ChannelConfig::explicit(1, vec![vec![0.5, 0.4], vec![0.5, 0.5]])).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
        let err = ChannelModel::new(ChannelConfig::explicit(1, vec![vec![1.0]])).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        let err = ChannelModel::new(ChannelConfig::round_robin(4, 1.5)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn equivalent_matrix_reproduces_round_robin_path() {
        let k = 4;
        let rr_model = rr(k, 0.9);
        let ex_model =
            ChannelModel::new(ChannelConfig::explicit(k, ChannelConfig::round_robin_equivalent_matrix(k, 0.9))).unwrap();
        let mut a = stream(99);
        let mut b = stream(99);
        let mut s_rr = ChannelJointState(0);
        let mut s_ex = ChannelJointState(1);
        for _ in 0..10_000 {
            s_rr = rr_model.step(s_rr, &mut a);
            s_ex = ex_model.step(s_ex, &mut b);
            for action in 0..=k {
                assert_eq!(rr_model.observe(s_rr, action), ex_model.observe(s_ex, action));
            }
        }
    }

    #[test]
    fn loads_matrix_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        std::fs::write(&path, "# two states\n0.5 0.5\n\n0.25   0.75\n").unwrap();
        assert_eq!(load_matrix(&path).unwrap(), vec![vec![0.5, 0.5], vec![0.25, 0.75]]);
        std::fs::write(&path, "0.5 x\n").unwrap();
        assert!(matches!(load_matrix(&path), Err(Error::Parse { .. })));
    }
}
