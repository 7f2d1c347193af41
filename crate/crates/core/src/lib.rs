//! Multi-winner federated-learning consensus, simulated at desk scale.
//!
//! Miners train a shared model on private data partitions, predict each
//! other's held-out records, rank those predictions by loss and submission
//! time, and the top-K by Borda score are averaged into the next global model.
//! Winners are paid in proportion to how far their training moved the model,
//! and their assigned transactions are committed to a hash-chained ledger.
//!
//! Everything runs inside a seeded discrete-event simulator ([`sim`]) so whole
//! runs are reproducible bit for bit.

pub mod agents;
pub mod chain;
pub mod consensus;
pub mod error;
pub mod export;
pub mod fl;
pub mod nn;
pub mod rng;
pub mod scenario;
pub mod sim;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};

/// Simulated time, in ticks.
pub type Tick = u64;

/// Miner identifier. Numbering starts at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MinerId(pub u32);

impl MinerId {
    /// Ledger account that receives this miner's rewards.
    pub fn account(self) -> String {
        format!("miner-{}", self.0)
    }
}

impl fmt::Display for MinerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}
