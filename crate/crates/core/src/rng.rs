//! Named random sub-streams derived from a single seed, so that changing how
//! many draws one consumer makes never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Excitation = 1,
    Restarts = 2,
    MeasurementNoise = 3,
    Fixtures = 4,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
