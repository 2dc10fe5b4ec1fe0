//! One root seed, split into independent ChaCha streams per consumer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Parameter initialization.
pub const INIT_STREAM: u64 = 1;
/// Window lengths, anchors and subsampling.
pub const SAMPLER_STREAM: u64 = 2;
/// Column-pair sampling in the redundancy metrics.
pub const PAIRS_STREAM: u64 = 3;
/// Batch order during training.
pub const SHUFFLE_STREAM: u64 = 4;

/// Generator for `stream` under the root `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
