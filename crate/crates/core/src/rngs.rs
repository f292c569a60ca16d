//! Named random sub-streams derived from a single experiment seed.
//!
//! Every consumer of randomness asks for its own stream so that adding draws
//! in one place never shifts the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Batch,
    PowerV,
    Curvature,
    Eval,
    Prototypes,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Batch => 3,
            Stream::PowerV => 4,
            Stream::Curvature => 5,
            Stream::Eval => 6,
            Stream::Prototypes => 7,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Stream keyed by an arbitrary integer (per-identity generation).
pub fn keyed(seed: u64, key: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x1000_0000 + key);
    rng
}
