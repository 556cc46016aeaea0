//! Derived RNG streams.
//!
//! Every random draw in training comes from a stream keyed by the run seed
//! plus a few coordinates (graph id, epoch, purpose), so changing one part
//! of a run (say, the CSSL weight) never shifts the randomness seen by
//! another part.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const AUG_QUERY: u64 = 1;
pub const AUG_KEY: u64 = 2;
pub const DROPOUT_CLS: u64 = 3;
pub const DROPOUT_CSSL: u64 = 4;
pub const WARMUP: u64 = 5;
pub const INIT: u64 = 6;
pub const SHUFFLE: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc.wrapping_mul(0x0100_0000_01b3) ^ p))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}
