//! Seeded random streams.
//!
//! Every stochastic routine takes a caller seed and derives an independent
//! ChaCha8 stream per task (sample, draw, direction, head), so results do not
//! depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier recorded in reports so runs can be reproduced elsewhere.
pub const RNG_ALGORITHM: &str =
    "ChaCha8 (rand_chacha 0.9): seed_from_u64(splitmix64-derived seed), stream = task index";

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of labels into a new seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Generator for task `stream` under `seed`.
pub fn substream(seed: u64, stream: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
