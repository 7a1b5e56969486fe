//! Seeded, platform-independent shuffling.
//!
//! Splits and epoch orders must be identical across machines and dependency
//! upgrades, so the shuffle is spelled out here instead of borrowing a
//! library's (version-dependent) sampling routine.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Name recorded next to artifacts produced with this generator.
pub const SHUFFLE_ALGORITHM: &str = "chacha8-fisher-yates-v1";

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform integer in `0..bound` by rejection sampling.
pub fn below(rng: &mut impl RngCore, bound: u64) -> u64 {
    assert!(bound > 0);
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % bound;
        }
    }
}

/// Uniform float in `[0, 1)` from the top 53 bits.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// In-place Fisher–Yates shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}
