//! Seed derivation. Every random stream in a run comes from one root seed
//! XOR-ed with the FNV-1a hash of a purpose tag, so streams are independent
//! of each other and of the order in which they are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(tag: &str) -> u64 {
    tag.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn derive_seed(root: u64, tag: &str) -> u64 {
    root ^ fnv1a(tag)
}

pub fn rng_for(root: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag))
}
