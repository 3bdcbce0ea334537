//! Reproducible seed lists from a single base seed.

/// One step of the SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th item of the stream rooted at `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// The first `n` seeds of the stream rooted at `base`.
pub fn seed_list(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(base, i)).collect()
}

/// Sub-stream tags so training, validation and evaluation days never share
/// a seed stream.
pub mod stream {
    pub const TRAIN: u64 = 0x7472_6169_6e00_0000;
    pub const VALIDATE: u64 = 0x7661_6c69_6400_0000;
    pub const SAMPLING: u64 = 0x7361_6d70_6c65_0000;
    pub const INIT: u64 = 0x696e_6974_0000_0000;
}
