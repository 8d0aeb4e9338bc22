//! Seed derivation for reproducible, schedule-independent randomness.
//!
//! Every random draw in a simulation comes from a ChaCha12 stream whose seed
//! is a stable hash of `(global seed, purpose, round, client)`. Streams for
//! different clients never depend on the order clients are processed in.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Generator name recorded in run manifests.
pub const RNG_ALGORITHM: &str = "ChaCha12 (rand_chacha 0.9), seeds from SplitMix64 chaining";
/// Gaussian sampler name recorded in run manifests.
pub const GAUSSIAN_ALGORITHM: &str = "ziggurat (rand_distr 0.5 StandardNormal)";

/// Purpose tags keep the streams of different subsystems disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Cohort = 1,
    LocalTraining = 2,
    Noise = 3,
    Population = 4,
    Shuffle = 5,
    ModelInit = 6,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit seed from a global seed and a sequence of coordinates.
pub fn derive_seed(global: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix64(global ^ splitmix64(stream as u64));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream_rng(global: u64, stream: Stream, coords: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(global, stream, coords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(
            derive_seed(42, Stream::Noise, &[3, 7]),
            derive_seed(42, Stream::Noise, &[3, 7])
        );
        let mut seen = HashSet::new();
        for s in [Stream::Cohort, Stream::LocalTraining, Stream::Noise] {
            for r in 0..50 {
                for c in 0..50 {
                    assert!(seen.insert(derive_seed(1, s, &[r, c])));
                }
            }
        }
        assert_ne!(derive_seed(1, Stream::Noise, &[1, 2]), derive_seed(1, Stream::Noise, &[2, 1]));
    }
}
