//! Stable 64-bit hashing for request seeds and mock image patterns.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the UTF-8 bytes of `text`. Stable across processes and platforms.
pub fn stable_hash(text: &str) -> u64 {
    text.as_bytes().iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}
