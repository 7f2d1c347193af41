//! Seed derivation for the simulator.
//!
//! Every stochastic step (shuffles, initialisation, cost noise, submitter
//! draws) gets its own ChaCha stream keyed by a base seed plus a path of
//! integers, so results never depend on the order in which work is executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags so different consumers of the same (round, miner) never share
/// a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Train = 2,
    TestSample = 3,
    TrainCost = 4,
    PredictCost = 5,
    VoteCost = 6,
    Submitter = 7,
    Dataset = 8,
    Partition = 9,
    Validation = 10,
}

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream_seed(base: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut full = Vec::with_capacity(path.len() + 1);
    full.push(stream as u64);
    full.extend_from_slice(path);
    derive_seed(base, &full)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
