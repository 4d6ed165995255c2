//! Seeded random streams. Each consumer of randomness in a run owns its own
//! ChaCha stream derived from the run seed, so that e.g. changing the test
//! set size never perturbs the training samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const TRAIN_STREAM: u64 = 0;
pub const TEST_STREAM: u64 = 1;
pub const GENERATOR_STREAM: u64 = 2;
pub const CHECK_STREAM: u64 = 3;

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
