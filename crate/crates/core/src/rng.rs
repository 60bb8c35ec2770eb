//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! `(seed, stream id)`, so changing how much one consumer draws never shifts
//! another consumer's numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Stable 64-bit id for a textual stream label (FNV-1a).
pub fn label(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Generator for a named stream, e.g. `named(seed, "base")`.
pub fn named(seed: u64, name: &str) -> Rng {
    stream(seed, label(name))
}
