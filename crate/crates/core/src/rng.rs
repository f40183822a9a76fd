//! Keyed random streams.
//!
//! Every random draw in a run is derived from the config seed plus a key
//! tuple (stream, epoch, batch, sample, block, ...). Two draws with the same
//! key are bitwise identical no matter in which order they are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream tags so that unrelated consumers never share a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Rater = 3,
    TrainNoise = 4,
    PredictNoise = 5,
    Generator = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed and a key path into a single 64-bit stream seed.
pub fn derive_seed(seed: u64, stream: Stream, key: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x5BD1_E995);
    h = splitmix64(h ^ stream as u64);
    for &k in key {
        h = splitmix64(h ^ k.wrapping_mul(0x2545_F491_4F6C_DD1D));
    }
    h
}

pub fn keyed_rng(seed: u64, stream: Stream, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, key))
}

pub fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
