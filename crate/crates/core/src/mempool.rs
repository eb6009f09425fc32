//! The miner's mempool, summarised as transaction counts per fee bin.
//!
//! Background traffic is tracked only as bin counts. The secondary user's
//! own transaction keeps its exact fee while pending; a pending transaction
//! that misses the block it was submitted for is folded into the background
//! counts of its bin.

use rand::Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MempoolConfig {
    /// Capacity `D_max`.
    pub capacity: usize,
    /// Number of equal-width fee bins `M`.
    pub bins: usize,
    pub fee_min: f64,
    pub fee_max: f64,
    pub arrivals_min: usize,
    pub arrivals_max: usize,
    pub add_min: usize,
    pub add_max: usize,
}

impl Default for MempoolConfig {
    fn default() -> Self {
        MempoolConfig {
            capacity: 50,
            bins: 5,
            fee_min: 0.0,
            fee_max: 1.0,
            arrivals_min: 0,
            arrivals_max: 4,
            add_min: 1,
            add_max: 5,
        }
    }
}

impl MempoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::config("mempool.D_max", "must be at least 1"));
        }
        if self.bins == 0 {
            return Err(Error::config("mempool.M", "must be at least 1"));
        }
        if !(self.fee_min.is_finite() && self.fee_max.is_finite() && self.fee_min < self.fee_max) {
            return Err(Error::config("mempool.fee_min", "need finite fee_min < fee_max"));
        }
        if self.arrivals_min > self.arrivals_max {
            return Err(Error::config("mempool.arrivals_min", "exceeds mempool.arrivals_max"));
        }
        if self.add_min > self.add_max {
            return Err(Error::config("mempool.add_min", "exceeds mempool.add_max"));
        }
        Ok(())
    }

    /// Index of the equal-width bin holding `fee`; the upper edge belongs to
    /// the last bin.
    pub fn fee_to_bin(&self, fee: f64) -> Result<usize> {
        if !(self.fee_min..=self.fee_max).contains(&fee) {
            return Err(Error::OutOfRange { value: fee, min: self.fee_min, max: self.fee_max });
        }
        let frac = (fee - self.fee_min) / (self.fee_max - self.fee_min);
        Ok(((frac * self.bins as f64).floor() as usize).min(self.bins - 1))
    }

    /// Centre of bin `bin`, the conditional mean of a uniform fee in it.
    pub fn bin_midpoint(&self, bin: usize) -> f64 {
        let width = (self.fee_max - self.fee_min) / self.bins as f64;
        self.fee_min + width * (bin as f64 + 0.5)
    }

    pub fn draw_fee<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.gen_range(self.fee_min..=self.fee_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuTransaction {
    pub fee: f64,
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MempoolState {
    bin_counts: Vec<usize>,
    su_tx: Option<SuTransaction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockOutcome {
    pub added: usize,
    pub su_included: bool,
}

impl MempoolState {
    pub fn empty(cfg: &MempoolConfig) -> Self {
        MempoolState { bin_counts: vec![0; cfg.bins], su_tx: None }
    }

    /// Builds a state from raw background counts (no pending SU transaction).
    pub fn from_counts(counts: Vec<usize>) -> Self {
        MempoolState { bin_counts: counts, su_tx: None }
    }

    pub fn bin_counts(&self) -> &[usize] {
        &self.bin_counts
    }

    pub fn su_tx(&self) -> Option<SuTransaction> {
        self.su_tx
    }

    /// Background transactions plus the pending SU transaction.
    pub fn occupancy(&self) -> usize {
        self.bin_counts.iter().sum::<usize>() + usize::from(self.su_tx.is_some())
    }

    /// Adds a discrete-uniform number of background arrivals with uniform
    /// fees. Arrivals that find the mempool full are dropped. Returns the
    /// number admitted.
    pub fn inject_arrivals<R: Rng + ?Sized>(&mut self, cfg: &MempoolConfig, rng: &mut R) -> usize {
        let n = rng.gen_range(cfg.arrivals_min..=cfg.arrivals_max);
        let mut admitted = 0;
        for _ in 0..n {
            if self.occupancy() >= cfg.capacity {
                break;
            }
            let bin = cfg.fee_to_bin(cfg.draw_fee(rng)).expect("drawn fee lies in range");
            self.bin_counts[bin] += 1;
            admitted += 1;
        }
        admitted
    }

    /// Places the SU transaction if there is room. At most one SU
    /// transaction may be pending.
    pub fn submit_su_tx(&mut self, fee: f64, cfg: &MempoolConfig) -> Result<bool> {
        if self.su_tx.is_some() {
            return Err(Error::Logic("SU transaction submitted while another is pending".into()));
        }
        let bin = cfg.fee_to_bin(fee)?;
        if self.occupancy() >= cfg.capacity {
            return Ok(false);
        }
        self.su_tx = Some(SuTransaction { fee, bin });
        Ok(true)
    }

    /// Draws the block size and forms a block; see [`Self::form_block_sized`].
    pub fn form_block<R: Rng + ?Sized>(&mut self, cfg: &MempoolConfig, rng: &mut R) -> BlockOutcome {
        let n_add = rng.gen_range(cfg.add_min..=cfg.add_max);
        self.form_block_sized(n_add, rng)
    }

    /// Removes `min(n_add, occupancy)` transactions, highest fee bin first.
    /// When the SU's bin is only partly drained the SU transaction is picked
    /// uniformly among that bin's members. A surviving SU transaction becomes
    /// background traffic.
    pub fn form_block_sized<R: Rng + ?Sized>(&mut self, n_add: usize, rng: &mut R) -> BlockOutcome {
        let mut remaining = n_add.min(self.occupancy());
        let mut outcome = BlockOutcome { added: remaining, su_included: false };
        let su = self.su_tx.take();
        for bin in (0..self.bin_counts.len()).rev() {
            if remaining == 0 {
                break;
            }
            let su_here = su.is_some_and(|t| t.bin == bin);
            let members = self.bin_counts[bin] + usize::from(su_here);
            let take = remaining.min(members);
            remaining -= take;
            if su_here {
                let picked = take == members || rng.gen_range(0..members) < take;
                if picked {
                    outcome.su_included = true;
                    self.bin_counts[bin] -= take - 1;
                    continue;
                }
            }
            self.bin_counts[bin] -= take;
        }
        if let (Some(tx), false) = (su, outcome.su_included) {
            self.bin_counts[tx.bin] += 1;
        }
        outcome
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn cfg() -> MempoolConfig {
        MempoolConfig::default()
    }

    #[test]
    fn fee_bins() {
        let c = cfg();
        assert_eq!(c.fee_to_bin(0.0).unwrap(), 0);
        assert_eq!(c.fee_to_bin(1.0).unwrap(), 4);
        assert_eq!(c.fee_to_bin(0.41).unwrap(), 2);
        assert_eq!(c.fee_to_bin(0.3).unwrap(), 1);
        assert!(matches!(c.fee_to_bin(1.01), Err(Error::OutOfRange { .. })));
        assert!(matches!(c.fee_to_bin(-0.1), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn zero_arrivals_leave_state_empty() {
        let c = MempoolConfig { arrivals_min: 0, arrivals_max: 0, ..cfg() };
        let mut mp = MempoolState::empty(&c);
        assert_eq!(mp.inject_arrivals(&c, &mut stream(1)), 0);
        assert_eq!(mp, MempoolState::empty(&c));
    }

    #[test]
    fn full_mempool_drops_arrivals() {
        let c = MempoolConfig { capacity: 3, arrivals_min: 4, arrivals_max: 4, ..cfg() };
        let mut mp = MempoolState::from_counts(vec![1, 0, 2, 0, 0]);
        let before = mp.clone();
        assert_eq!(mp.inject_arrivals(&c, &mut stream(2)), 0);
        assert_eq!(mp, before);
    }

    #[test]
    fn arrivals_spread_evenly_over_bins() {
        let c = MempoolConfig { arrivals_min: 10, arrivals_max: 10, ..cfg() };
        let mut rng = stream(3);
        let trials = 10_000;
        let mut totals = [0usize; 5];
        for _ in 0..trials {
            let mut mp = MempoolState::empty(&c);
            mp.inject_arrivals(&c, &mut rng);
            assert_eq!(mp.occupancy(), 10);
            for (t, n) in totals.iter_mut().zip(mp.bin_counts()) {
                *t += n;
            }
        }
        for t in totals {
            let mean = t as f64 / trials as f64;
            assert!((mean - 2.0).abs() < 0.05, "per-bin mean {mean}");
        }
    }

    #[test]
    fn submission_cases() {
        let c = cfg();
        let mut mp = MempoolState::empty(&c);
        assert!(mp.submit_su_tx(0.3, &c).unwrap());
        assert_eq!(mp.su_tx(), Some(SuTransaction { fee: 0.3, bin: 1 }));
        assert!(matches!(mp.submit_su_tx(0.3, &c), Err(Error::Logic(_))));

        let mut full = MempoolState::from_counts(vec![10; 5]);
        let before = full.clone();
        assert!(!full.submit_su_tx(0.5, &c).unwrap());
        assert_eq!(full, before);

        let mut nearly = MempoolState::from_counts(vec![10, 10, 10, 10, 9]);
        assert!(nearly.submit_su_tx(0.99, &c).unwrap());
        assert_eq!(nearly.occupancy(), 50);
    }

    #[test]
    fn empty_block() {
        let mut mp = MempoolState::empty(&cfg());
        let out = mp.form_block(&cfg(), &mut stream(4));
        assert_eq!(out, BlockOutcome { added: 0, su_included: false });
        assert_eq!(mp.occupancy(), 0);
    }

    #[test]
    fn full_drain_of_top_bin_includes_su() {
        let c = cfg();
        let mut mp = MempoolState::from_counts(vec![0, 0, 0, 0, 3]);
        mp.submit_su_tx(0.95, &c).unwrap();
        let out = mp.form_block_sized(4, &mut stream(5));
        assert_eq!(out, BlockOutcome { added: 4, su_included: true });
        assert_eq!(mp.occupancy(), 0);
    }

    #[test]
    fn partial_bin_inclusion_is_uniform() {
        let c = cfg();
        let mut rng = stream(6);
        let trials = 100_000;
        let mut hits = 0;
        for _ in 0..trials {
            let mut mp = MempoolState::from_counts(vec![1, 0, 0, 0, 5]);
            mp.submit_su_tx(0.9, &c).unwrap();
            let out = mp.form_block_sized(3, &mut rng);
            assert_eq!(out.added, 3);
            assert_eq!(mp.bin_counts(), &[1, 0, 0, 0, 3]);
            hits += usize::from(out.su_included);
        }
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.5).abs() < 0.02, "inclusion frequency {freq}");
    }

    #[test]
    fn lower_bin_su_waits_and_is_demoted() {
        let c = cfg();
        let mut mp = MempoolState::from_counts(vec![0, 0, 0, 2, 0]);
        mp.submit_su_tx(0.1, &c).unwrap();
        let out = mp.form_block_sized(2, &mut stream(7));
        assert!(!out.su_included);
        assert_eq!(mp.bin_counts(), &[1, 0, 0, 0, 0]);
        assert_eq!(mp.su_tx(), None);
    }
}
