//! Counter-based random streams.
//!
//! Every stream is keyed by `(seed, domain, index)`, so a draw never depends on
//! how many values other streams consumed. Training steps, epochs, snapshots
//! and samples each get their own domain.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Snapshot,
    Epoch,
    TrainStep,
    Sample,
    Init,
}

impl Domain {
    fn tag(self) -> &'static [u8] {
        match self {
            Domain::Snapshot => b"snapshot",
            Domain::Epoch => b"epoch",
            Domain::TrainStep => b"train-step",
            Domain::Sample => b"sample",
            Domain::Init => b"init",
        }
    }
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.tag());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
