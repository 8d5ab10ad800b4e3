//! Seeded random streams.
//!
//! Every worker owns a private ChaCha stream keyed by `(experiment seed,
//! worker id)`. ChaCha is counter based, so a stream's output depends only on
//! how many values that worker has drawn, never on the interleaving of
//! workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type WorkerRng = ChaCha8Rng;

const GRADIENT_DOMAIN: u64 = 0;
const DELAY_DOMAIN: u64 = 1;
const DATA_DOMAIN: u64 = 2;
const AUX_DOMAIN: u64 = 3;

fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index << 2) | domain);
    rng
}

/// Stream used for a worker's stochastic gradients.
pub fn gradient_stream(seed: u64, worker: usize) -> WorkerRng {
    stream(seed, GRADIENT_DOMAIN, worker as u64)
}

/// Stream used for a worker's outgoing message delays.
pub fn delay_stream(seed: u64, worker: usize) -> WorkerRng {
    stream(seed, DELAY_DOMAIN, worker as u64)
}

/// Stream used to synthesize a worker's data shard.
pub fn data_stream(seed: u64, worker: usize) -> WorkerRng {
    stream(seed, DATA_DOMAIN, worker as u64)
}

/// Auxiliary stream (initial points, shared teachers, estimation grids).
pub fn aux_stream(seed: u64, purpose: u64) -> WorkerRng {
    stream(seed, AUX_DOMAIN, purpose)
}
