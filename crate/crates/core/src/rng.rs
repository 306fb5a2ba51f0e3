//! Seeded random streams. Every stochastic routine takes an explicit
//! generator; independent streams are derived from `(seed, tag, index)` so
//! that results do not depend on iteration order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> Rng {
    let mut h = splitmix(seed ^ 0x6a09_e667_f3bc_c908);
    for b in tag.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    h = splitmix(h ^ index);
    Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
