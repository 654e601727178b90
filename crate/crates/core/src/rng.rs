//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by an
//! explicit `(seed, a, b)` triple, so a draw never depends on evaluation order
//! or on how many workers were used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream for the `(seed, a, b)` triple. Distinct triples give independent
/// streams; the key layout is injective.
pub fn substream(seed: u64, a: u64, b: u64) -> Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..32].copy_from_slice(b"splatmsk");
    ChaCha8Rng::from_seed(key)
}

pub fn seeded(seed: u64) -> Rng {
    substream(seed, u64::MAX, u64::MAX)
}
