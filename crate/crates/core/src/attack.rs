//! Double-spend success probability.
//!
//! The attacker mines privately while the honest network produces `n`
//! confirmations; the attack succeeds if the private chain ever overtakes
//! the public one. [`attack_probability`] evaluates the closed-form series
//! and [`race_oracle`] estimates the same quantity by simulating the race.

use rand::Rng;

use crate::{Error, Result};

/// Largest confirmation depth the series is evaluated for.
pub const MAX_DEPTH: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackParams {
    /// Probability that the attacker finds the next block.
    pub q: f64,
    /// Confirmation depth (honest blocks).
    pub n: u32,
}

impl Default for AttackParams {
    fn default() -> Self {
        AttackParams { q: 0.02, n: 1 }
    }
}

impl AttackParams {
    pub fn new(q: f64, n: u32) -> Result<Self> {
        let params = AttackParams { q, n };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::config("attack.q", format!("{} not in [0, 1]", self.q)));
        }
        if self.n == 0 || self.n > MAX_DEPTH {
            return Err(Error::config("attack.n", format!("{} not in [1, {MAX_DEPTH}]", self.n)));
        }
        Ok(())
    }

    /// Honest block-find probability `p = 1 - q`.
    pub fn p(&self) -> f64 {
        1.0 - self.q
    }
}

/// `1 - sum_{m=0}^{n} C(m+n-1, m) (p^n q^m - p^m q^n)` for `q < p`, and 1
/// otherwise. Binomials and powers are carried as running products.
pub fn attack_probability(params: &AttackParams) -> f64 {
    let q = params.q;
    let p = 1.0 - q;
    if q >= p {
        return 1.0;
    }
    let n = params.n as i32;
    let p_n = p.powi(n);
    let q_n = q.powi(n);
    let mut binom = 1.0; // C(n-1, 0)
    let mut q_m = 1.0;
    let mut p_m = 1.0;
    let mut sum = 0.0;
    for m in 0..=params.n {
        if m > 0 {
            binom *= f64::from(m + params.n - 1) / f64::from(m);
            q_m *= q;
            p_m *= p;
        }
        sum += binom * (p_n * q_m - p_m * q_n);
    }
    (1.0 - sum).clamp(0.0, 1.0)
}

/// Deficits at which the catch-up walk is abandoned carry less than this
/// probability of ever recovering.
const WALK_CUTOFF_PROB: f64 = 1e-12;

/// Monte Carlo estimate of the double-spend success probability.
///
/// Each trial mines blocks one at a time (attacker with probability `q`)
/// until the honest network has `n` blocks. With `m` attacker blocks the
/// attacker trails by `z = n - m`; `z <= 0` is an immediate success.
/// Otherwise the race continues as a gambler's-ruin walk, which is certain
/// to reach the honest chain when `q >= p` and is simulated step by step
/// otherwise.
pub fn race_oracle<R: Rng + ?Sized>(params: &AttackParams, trials: u64, rng: &mut R) -> f64 {
    let q = params.q;
    let p = 1.0 - q;
    let n = i64::from(params.n);
    let give_up = if q > 0.0 && q < p {
        n + (WALK_CUTOFF_PROB.ln() / (q / p).ln()).ceil() as i64 + 1
    } else {
        n + 1
    };
    let mut wins = 0u64;
    for _ in 0..trials {
        let mut honest = 0;
        let mut attacker = 0;
        while honest < n {
            if rng.gen::<f64>() < q {
                attacker += 1;
            } else {
                honest += 1;
            }
        }
        let mut deficit = n - attacker;
        let won = if deficit <= 0 || q >= p {
            true
        } else {
            while deficit > 0 && deficit < give_up {
                if rng.gen::<f64>() < q {
                    deficit -= 1;
                } else {
                    deficit += 1;
                }
            }
            deficit == 0
        };
        wins += u64::from(won);
    }
    wins as f64 / trials as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn attacker_majority_always_succeeds() {
        assert_eq!(attack_probability(&AttackParams { q: 0.6, n: 3 }), 1.0);
        assert_eq!(attack_probability(&AttackParams { q: 0.5, n: 1 }), 1.0);
    }

    #[test]
    fn powerless_attacker_never_succeeds() {
        assert_eq!(attack_probability(&AttackParams { q: 0.0, n: 5 }), 0.0);
        assert_eq!(race_oracle(&AttackParams { q: 0.0, n: 3 }, 1000, &mut stream(0)), 0.0);
    }

    #[test]
    fn single_confirmation_doubles_q() {
        let pa = attack_probability(&AttackParams { q: 0.02, n: 1 });
        assert!((pa - 0.04).abs() < 1e-15, "{pa}");
        // race-oracle cross-check
        let trials = 400_000;
        let est = race_oracle(&AttackParams { q: 0.02, n: 1 }, trials, &mut stream(1));
        let se = (0.04f64 * 0.96 / trials as f64).sqrt();
        assert!((est - 0.04).abs() < 4.0 * se, "estimate {est}");
    }

    #[test]
    fn majority_race_is_certain() {
        assert_eq!(race_oracle(&AttackParams { q: 0.5, n: 2 }, 100_000, &mut stream(2)), 1.0);
    }

    #[test]
    fn oracle_agrees_at_q_point_one() {
        let params = AttackParams { q: 0.1, n: 2 };
        let est = race_oracle(&params, 1_000_000, &mut stream(3));
        let exact = attack_probability(&params);
        assert!((est - exact).abs() < 0.002, "{est} vs {exact}");
    }

    #[test]
    fn monotone_in_q_and_n() {
        for n in 1..=8 {
            let mut prev = 0.0;
            for i in 0..50 {
                let pa = attack_probability(&AttackParams { q: i as f64 / 100.0, n });
                assert!(pa >= prev, "n={n} q={}", i as f64 / 100.0);
                prev = pa;
            }
        }
        for i in 0..50 {
            let q = i as f64 / 100.0;
            let mut prev = 1.0;
            for n in 1..=MAX_DEPTH {
                let pa = attack_probability(&AttackParams { q, n });
                assert!(pa <= prev + 1e-12, "q={q} n={n}: {pa} > {prev}");
                prev = pa;
            }
        }
    }

    #[test]
    fn approaches_one_near_even_split() {
        assert!(attack_probability(&AttackParams { q: 0.49, n: 1 }) > 0.9);
    }

    #[test]
    fn deep_confirmation_stays_finite() {
        let pa = attack_probability(&AttackParams { q: 0.45, n: MAX_DEPTH });
        assert!(pa.is_finite() && (0.0..=1.0).contains(&pa));
    }

    #[test]
    fn validates_params() {
        assert!(AttackParams::new(1.2, 1).is_err());
        assert!(AttackParams::new(0.1, 0).is_err());
        assert!(AttackParams::new(0.1, 65).is_err());
        assert!(AttackParams::new(0.1, 6).is_ok());
    }
}
