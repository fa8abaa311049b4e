//! Named PRNG streams derived from a single experiment seed.
//!
//! Every consumer of randomness asks for its own stream so that adding draws
//! in one place never perturbs another. There is no global RNG.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Uniform-noise initial images for forging runs.
    InitNoise,
    /// Gaussian jitter of the synthetic calibration set.
    CalibrationJitter,
    /// Random stand-in images for master-image checks.
    StandIns,
    /// Random images for gradient checks.
    GradCheck,
    /// Fixed encoder weights of the toy backend.
    EncoderWeights,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::InitNoise => 1,
            Stream::CalibrationJitter => 2,
            Stream::StandIns => 3,
            Stream::GradCheck => 4,
            Stream::EncoderWeights => 5,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
