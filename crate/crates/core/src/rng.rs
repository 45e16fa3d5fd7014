//! Seeded RNG construction.
//!
//! All randomness in the crate flows through explicitly seeded ChaCha
//! generators so that every pipeline stage is reproducible byte-for-byte.
//! Per-item draws use [`stream`], which gives each item its own counter-based
//! stream: results do not depend on the order items are visited, so example
//! generation stays deterministic even if it is ever parallelized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for item `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Stream 0 is the "main" generator; items start at 1.
    rng.set_stream(index.wrapping_add(1));
    rng
}
