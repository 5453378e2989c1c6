//! Reproducible random streams.
//!
//! Every random quantity in an experiment is drawn from a ChaCha stream whose
//! key is the SHA-256 digest of `(master seed, replication index, role)`.
//! Streams for different roles inside one replication are independent, so the
//! delay sequence, the mini-batch indices and the Gaussian increments can be
//! shared across coupled runs without disturbing each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used everywhere in the crate.
pub type StreamRng = ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamRole {
    Delay,
    Minibatch,
    Gaussian,
    Calibration,
    Auxiliary,
}

impl StreamRole {
    fn tag(self) -> u8 {
        match self {
            StreamRole::Delay => 1,
            StreamRole::Minibatch => 2,
            StreamRole::Gaussian => 3,
            StreamRole::Calibration => 4,
            StreamRole::Auxiliary => 5,
        }
    }
}

/// Derives the stream for `(seed, replication, role)`.
pub fn derive_stream(seed: u64, replication: u64, role: StreamRole) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(b"sdde-optlab/stream/v1");
    hasher.update(seed.to_le_bytes());
    hasher.update(replication.to_le_bytes());
    hasher.update([role.tag()]);
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    StreamRng::from_seed(key)
}
