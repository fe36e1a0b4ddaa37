//! Counter-based seed derivation.
//!
//! Every random stream in the crate is keyed on a tuple of integers so that
//! results do not depend on the order in which independent pieces of work run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a list of keys into one seed.
pub fn derive(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x5eed_u64, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Stable 64-bit hash of a string, independent of platform and toolchain.
pub fn hash_str(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng(keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(keys))
}
