//! Deterministic random streams.
//!
//! Every random concern (data order, subset sampling, augmentation, ...) draws
//! from its own ChaCha stream keyed by `(seed, concern, index)`. Streams never
//! share state, so enabling or disabling one consumer cannot shift the values
//! another consumer sees, and any step can be replayed without saved rng state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Concern {
    DataOrder = 1,
    Subset = 2,
    Augment = 3,
    Init = 4,
    Scene = 5,
    MonteCarlo = 6,
    Prior = 7,
}

/// Rng for `concern` at position `index` (a step or a sample index).
pub fn stream(seed: u64, concern: Concern, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((concern as u64) << 56) ^ index);
    rng
}
