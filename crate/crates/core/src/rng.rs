//! All randomness flows through ChaCha8 streams derived from one run seed.
//! Distinct consumers get distinct stream ids, so adding draws in one place
//! (say, a new init scheme) cannot shift the values another place sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream id blocks. Within a block, offsets index epochs or samples.
pub mod streams {
    /// Parameter initialization.
    pub const INIT: u64 = 0;
    /// Per-epoch example shuffling: `SHUFFLE + epoch`.
    pub const SHUFFLE: u64 = 1 << 32;
    /// Per-epoch sentence masking: `MASK + epoch`.
    pub const MASK: u64 = 2 << 32;
    /// Per-sample synthetic data draws: `DATA + sample_index`.
    pub const DATA: u64 = 3 << 32;
}

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
