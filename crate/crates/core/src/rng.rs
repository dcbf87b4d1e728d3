//! Seeded generators.
//!
//! Every random decision flows from an explicit `u64` seed. Independent
//! sub-tasks (episodes, explanation items, questions) draw from separate
//! ChaCha streams of one seed, so fan-out order never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for sub-task `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
