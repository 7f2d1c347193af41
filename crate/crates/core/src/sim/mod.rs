//! Deterministic discrete-event harness around the consensus round.

pub mod cost;
pub mod data;
pub mod events;
pub mod metrics;
mod runner;

use std::collections::BTreeSet;

pub use cost::{CostModel, CostParams};
pub use data::{partition_data, split_validation, synthetic_dataset, DatasetSpec, Partition};
pub use events::EventQueue;
pub use metrics::{MetricsLog, MetricsRow, RoundMetrics, CSV_HEADER};
pub use runner::{run_simulation, run_simulation_observed, RoundView, SimOutput, SimStatus};

use crate::agents::{MinerProfile, SubmitterConfig};
use crate::consensus::RoundConfig;
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, Dataset};

/// A fully resolved simulation: data already partitioned, deadlines fixed.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub rounds: u64,
    pub arch: ArchSpec,
    pub miners: Vec<MinerProfile>,
    /// Global held-out set; never given to a miner.
    pub validation: Dataset,
    pub round_config: RoundConfig,
    pub cost: CostModel,
    pub submitter: SubmitterConfig,
    pub txs_per_miner: usize,
    pub initial_balances: Vec<(String, f64)>,
    /// Worker threads for per-phase agent work; 0 picks the machine default.
    pub threads: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.miners.is_empty() {
            return Err(Error::Config("at least one miner is required".into()));
        }
        let ids: BTreeSet<_> = self.miners.iter().map(|m| m.id).collect();
        if ids.len() != self.miners.len() {
            return Err(Error::Config("miner ids must be unique".into()));
        }
        self.round_config.validate(self.miners.len())?;
        let (d, c) = (self.arch.input_dim(), self.arch.output_dim());
        for m in &self.miners {
            if m.train_data.dim() != d || m.train_data.classes() != c {
                return Err(Error::Config(format!(
                    "miner {} data is {}-d with {} classes, model expects {d} and {c}",
                    m.id,
                    m.train_data.dim(),
                    m.train_data.classes()
                )));
            }
        }
        if self.validation.dim() != d || self.validation.classes() != c {
            return Err(Error::Config("validation set does not match the model".into()));
        }
        self.submitter.validate()?;
        if self.submitter.rate_per_round > 0 && self.initial_balances.len() < 2 {
            return Err(Error::Config(
                "the submitter needs at least two funded accounts".into(),
            ));
        }
        Ok(())
    }

    pub fn user_accounts(&self) -> Vec<String> {
        self.initial_balances.iter().map(|(a, _)| a.clone()).collect()
    }
}
