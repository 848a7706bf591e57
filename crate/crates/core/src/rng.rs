//! Keyed random streams.
//!
//! Every stream is addressed by a tuple of integers (for example
//! `(seed, sample, step)`), so a value never depends on the order in which
//! streams are consumed. Gaussian variates come from the ziggurat sampler of
//! `rand_distr::StandardNormal`; bit-exactness holds within one build.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a seed together with a sequence of indices into a new 64-bit seed.
pub fn derive_seed(seed: u64, indices: &[u64]) -> u64 {
    let mut h = mix64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for &i in indices {
        h = mix64(h.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ mix64(i.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

/// A generator for the stream addressed by `(seed, indices...)`.
pub fn keyed_rng(seed: u64, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, indices))
}

/// Fills `out` with independent standard normal variates.
pub fn fill_standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}
