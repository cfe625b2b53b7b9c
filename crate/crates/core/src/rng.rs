//! Counter-keyed random streams.
//!
//! Every stream is a ChaCha generator keyed by `(seed, stream, counter)`, so the
//! whole random state of a run is the seed plus a step counter. That makes
//! checkpoints trivially resumable and keeps streams independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    AnswerTable,
    DistractorTable,
    TrainSplit,
    TestSplit,
    Init,
    DataOrder,
    DiscNoise,
    GenNoise,
    Eval,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::AnswerTable => 1,
            Stream::DistractorTable => 2,
            Stream::TrainSplit => 3,
            Stream::TestSplit => 4,
            Stream::Init => 5,
            Stream::DataOrder => 6,
            Stream::DiscNoise => 7,
            Stream::GenNoise => 8,
            Stream::Eval => 9,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.id().to_le_bytes());
    key[16..24].copy_from_slice(&counter.to_le_bytes());
    key[24..].copy_from_slice(b"genb-rng");
    ChaCha8Rng::from_seed(key)
}
