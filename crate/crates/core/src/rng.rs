//! Seeded random streams. Every stochastic component derives its own
//! `ChaCha8Rng` from a root seed and a stream key so results do not depend on
//! evaluation order or worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, key: u64) -> u64 {
    mix(mix(root) ^ key.wrapping_mul(0xD605_BBB5_8C8A_BBF5))
}

pub fn stream(root: u64, key: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, key))
}

/// Stream keyed by a named purpose plus an index.
pub fn named_stream(root: u64, purpose: &str, index: u64) -> StreamRng {
    let tag = purpose
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    stream(derive_seed(root, tag), index)
}

pub fn normal_f32<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

pub fn normal_f64<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| normal_f32(rng)).collect()
}
