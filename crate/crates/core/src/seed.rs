//! Deterministic derivation of independent RNG seeds from one master seed.

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for sub-stream `(domain, index)` of `master`. Distinct domains keep
/// e.g. node noise and data generation from sharing streams.
pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    let a = mix64(master.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let b = mix64(a ^ domain.wrapping_mul(0xd1b5_4a32_d192_ed03));
    mix64(b ^ index.wrapping_mul(0x8cb9_2ba7_2f3d_8dd7).wrapping_add(1))
}

pub mod domain {
    pub const NODE_NOISE: u64 = 1;
    pub const COVARIATES: u64 = 2;
    pub const COEFFICIENTS: u64 = 3;
    pub const ERRORS: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const TOPOLOGY: u64 = 6;
    pub const REPLICATION: u64 = 7;
}
