// SPDX-License-Identifier: Apache-2.0

//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a 64-bit value produced by [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One step of the splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for stream `index` of `seed`: `splitmix64(splitmix64(seed) ^ index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

pub fn rng_from(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}
