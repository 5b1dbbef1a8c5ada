//! Seeded, splittable random streams.
//!
//! All randomness is drawn from ChaCha8 keyed by a 64-bit seed, with the
//! stream id selecting an independent sub-sequence. Results therefore depend
//! only on `(seed, stream)` and not on thread count or call order elsewhere.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids for the distinct consumers of a run seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const MASK: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const SEASON: u64 = 5;
    pub const EVAL: u64 = 6;
}

/// Independent generator for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 64-bit stream id: high bits name the consumer, low bits the index.
    rng.set_stream(stream.wrapping_shl(40) ^ index);
    rng
}

/// A child seed for item `index` of a family, independent of neighbouring
/// parent seeds.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    stream_rng(seed, stream, index).next_u64()
}
