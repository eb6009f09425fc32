//! Seed derivation for reproducible, independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream used throughout the simulator.
pub type SimRng = ChaCha8Rng;

/// SplitMix64 finaliser; decorrelates nearby seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a path of indices.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p.wrapping_add(1))))
}

pub fn stream(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Samples an index from `(index, probability)` pairs with a single uniform
/// draw, scanning entries in the order given.
pub fn sample_weighted<R: rand::Rng + ?Sized>(rng: &mut R, entries: &[(usize, f64)]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(idx, p) in entries {
        acc += p;
        if u < acc {
            return idx;
        }
    }
    // rounding left the cumulative sum just under 1
    entries.iter().rev().find(|(_, p)| *p > 0.0).map_or(entries[0].0, |e| e.0)
}
