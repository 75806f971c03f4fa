//! Seed derivation. Every stochastic consumer gets its own generator seeded
//! from the run seed plus a purpose tag, so adding or reordering consumers
//! never perturbs the others and a resumed stage sees the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Purpose tags for [`rng_for`].
pub mod tag {
    pub const CLASS_ORDER: u64 = 1;
    pub const MOTIFS: u64 = 2;
    pub const JITTER: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const HEAD: u64 = 6;
    pub const BATCHES: u64 = 7;
    pub const FRAMES: u64 = 8;
    pub const FINETUNE: u64 = 9;
    pub const TEST_SPLIT: u64 = 10;
    pub const EXEMPLAR: u64 = 11;
}
