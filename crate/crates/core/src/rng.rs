//! Seeded random streams.
//!
//! Every phase of a run draws from its own stream, derived by hashing a
//! label into the user seed. Adding draws to one stream never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed of the stream named `label` under `seed`.
pub fn stream_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(label)))
}

/// Seed of the `index`-th child of a labelled stream.
pub fn indexed_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(stream_seed(seed, label) ^ splitmix64(index.wrapping_add(1)))
}

pub fn seeded(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

pub fn stream(seed: u64, label: &str) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(seed, label))
}

pub fn indexed_stream(seed: u64, label: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(indexed_seed(seed, label, index))
}

pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
