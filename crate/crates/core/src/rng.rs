//! Splittable, counter-based random streams.
//!
//! All randomness flows from a root seed through [`child`], which derives an
//! independent ChaCha8 stream from a seed and a path of integers (iteration,
//! item, chain, ...). Parallel work never shares a generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn root(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for `path` under `seed`; distinct paths give independent streams.
pub fn child(seed: u64, path: &[u64]) -> Stream {
    let mut key = splitmix64(seed);
    for &p in path {
        key = splitmix64(key ^ splitmix64(p.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    ChaCha8Rng::seed_from_u64(key)
}

/// Position of a stream, in 32-bit words consumed.
pub fn cursor(rng: &Stream) -> u128 {
    rng.get_word_pos()
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform draw in `[0, 1)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}
