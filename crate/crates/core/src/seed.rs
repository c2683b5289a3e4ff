//! Seed derivation. Every random stream in the crate is keyed off a single
//! run seed so that partial reruns reproduce exactly.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a parent seed with a child key into an independent child seed.
pub fn mix_seed(parent: u64, key: u64) -> u64 {
    splitmix64(parent ^ splitmix64(key.wrapping_mul(GOLDEN)))
}
