//! Reproducible random streams.
//!
//! Every consumer draws from a ChaCha8 generator seeded with the run's master
//! seed and a stream id hashed from a key, so results do not depend on the
//! order in which parallel work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream id for a key.
pub fn stream_id(key: &[u64]) -> u64 {
    key.iter()
        .fold(0x6a09_e667_f3bc_c908, |h, &k| splitmix(h ^ splitmix(k)))
}

/// Generator for `key` under `seed`.
pub fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(key));
    rng
}

/// Derived 64-bit seed, for handing a sub-seed to another component.
pub fn derive_seed(seed: u64, key: &[u64]) -> u64 {
    splitmix(seed ^ stream_id(key))
}
