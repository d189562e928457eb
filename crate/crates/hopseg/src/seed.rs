//! Deterministic seed derivation.
//!
//! Every random stream in the crate is derived from one root seed and a
//! textual label, so independent components never share or reorder draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the root seed bytes followed by the label bytes.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in root.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Seed a ChaCha stream for `(root, label)`.
pub fn seeded_rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

/// Uniform draw in `(-scale, scale)`, the init used for all weights.
pub fn uniform_symmetric(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    use rand::Rng;
    let u: f64 = rng.gen();
    scale * (2.0 * u - 1.0)
}
