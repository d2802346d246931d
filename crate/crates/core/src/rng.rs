//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, stream, index)`, so stochastic
//! rounding gives the same bits no matter how elements are scheduled across
//! threads.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub fn counter_u64(seed: u64, stream: u64, index: u64) -> u64 {
    let s = mix64(seed.wrapping_add(GOLDEN));
    let t = mix64(stream.wrapping_add(s).wrapping_mul(GOLDEN) ^ 0x6a09_e667_f3bc_c909);
    mix64(index.wrapping_add(t).wrapping_mul(GOLDEN).wrapping_add(s))
}

/// Uniform draw in `[0, 1)` with 53 random bits.
#[inline]
pub fn counter_uniform(seed: u64, stream: u64, index: u64) -> f64 {
    (counter_u64(seed, stream, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derives an independent named sub-stream seed from a root seed.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the root.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(root ^ mix64(h))
}
