//! Deterministic sub-seed derivation.
//!
//! Parallel work (sample generation, per-combination training runs)
//! must reproduce bit-identically regardless of scheduling, so every
//! unit of work derives its own seed from the master seed and its
//! index, never from a shared generator.

/// The `index`-th sub-seed of `master`: the splitmix64 output for state
/// `master + (index + 1) * golden-gamma`. Distinct indices give
/// decorrelated streams; index 0 never aliases the master seed itself.
pub fn sub_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
