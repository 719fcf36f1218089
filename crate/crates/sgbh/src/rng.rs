//! Reproducible random-number plumbing.
//!
//! Every consumer gets its own ChaCha12 stream whose seed is a splittable
//! hash of the master seed and a tag path, never a sequential offset. A
//! trajectory owns one stream per mode, so refining the resolved band reuses
//! the coarse modes' draws as an exact prefix, and worker scheduling can
//! never reorder anybody's randomness.

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rand::SeedableRng;

/// Domain-separation tags for the seed hash.
pub mod tag {
    pub const TRAJECTORY: u64 = 0x7452_414a_0000_0001;
    pub const MODE: u64 = 0x4d4f_4445_0000_0002;
    pub const SWEEP_VALUE: u64 = 0x5357_4545_0000_0003;
    pub const SAMPLER: u64 = 0x5341_4d50_0000_0004;
}

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a master seed with a tag path into a sub-seed. Tags are folded in
/// order; distinct paths give unrelated streams.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    let mut state = mix(master ^ 0xa076_1d64_78bd_642f);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    state
}

/// One ChaCha12 stream per mode of one trajectory.
pub struct ModeStreams {
    rngs: Vec<ChaCha12Rng>,
}

impl ModeStreams {
    pub fn new(master_seed: u64, trajectory: u64, n_modes: usize) -> Self {
        let rngs = (0..n_modes as u64)
            .map(|k| {
                ChaCha12Rng::seed_from_u64(derive(
                    master_seed,
                    &[tag::TRAJECTORY, trajectory, tag::MODE, k],
                ))
            })
            .collect();
        ModeStreams { rngs }
    }

    pub fn n_modes(&self) -> usize {
        self.rngs.len()
    }

    /// One standard normal from mode `k`'s stream (0-based index).
    #[inline]
    pub fn normal(&mut self, k: usize) -> f64 {
        StandardNormal.sample(&mut self.rngs[k])
    }
}

/// A single derived stream for non-mode randomness (field sampling in
/// audits, test data, ...).
pub fn stream(master_seed: u64, tags: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive(master_seed, tags))
}
