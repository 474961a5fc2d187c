//! Seed expansion. One user-facing seed fans out into independent ChaCha
//! streams, one per consumer, so adding draws in one module never shifts
//! another module's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. Values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    Init = 2,
    Triplets = 3,
    Synth = 4,
}

/// RNG for `stream` under `seed`, optionally offset by a counter (e.g. the epoch).
pub fn stream_rng(seed: u64, stream: Stream, counter: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ counter);
    rng
}
