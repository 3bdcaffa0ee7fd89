//! Seed splitting.
//!
//! Every random stream is a ChaCha8 generator keyed by the run seed. Streams
//! are told apart by the ChaCha stream id, which is the SplitMix64 fold of a
//! path of integers: `[CHAINS, chain]` for sampler chain `chain`,
//! `[REPLICATES, kernel, replicate, purpose, ...]` for simulation replicates.
//! Streams with different paths never overlap, so results do not depend on
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const CHAINS: u64 = 1;
pub const REPLICATES: u64 = 2;
pub const MISC: u64 = 3;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for the stream named by `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let id = path.iter().fold(0u64, |acc, &p| splitmix(acc ^ splitmix(p)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
