//! Seed derivation and sampling helpers.
//!
//! Every random decision in a run is drawn from a ChaCha8 stream seeded by
//! mixing the run seed with fixed stream tags (epoch, batch, sample index).
//! Keeping the mixing explicit makes runs bit-reproducible and lets callers
//! fan work out to parallel workers without perturbing the streams.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with stream tags into a single derived seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut state = 0x243f_6a88_85a3_08d3; // pi digits, nothing up the sleeve
    for &p in parts {
        state = splitmix64(state ^ p);
    }
    state
}

/// ChaCha8 stream for a derived seed.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Uniform f64 in [0, 1) with 53 random bits.
pub fn uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform f64 in [lo, hi).
pub fn uniform_in(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

/// Standard normal pair via Box-Muller.
pub fn normal_pair(rng: &mut impl RngCore) -> (f64, f64) {
    let u1 = uniform(rng).max(f64::MIN_POSITIVE);
    let u2 = uniform(rng);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Unbiased draw from [0, bound) by rejection.
pub fn below(rng: &mut impl RngCore, bound: u64) -> u64 {
    assert!(bound > 0, "below() requires a positive bound");
    let zone = u64::MAX - (u64::MAX - bound + 1) % bound;
    loop {
        let v = rng.next_u64();
        if v <= zone {
            return v % bound;
        }
    }
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, (i + 1) as u64) as usize;
        items.swap(i, j);
    }
}

/// Draw `k` distinct indices from 0..n, uniformly without replacement.
pub fn sample_indices(rng: &mut impl RngCore, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} of {n} indices");
    let mut pool: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: the first k slots end up uniform without replacement.
    for i in 0..k {
        let j = i + below(rng, (n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
