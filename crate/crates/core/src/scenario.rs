//! Scenario files and presets.
//!
//! A scenario is a small TOML document. Every key has a default, so an empty
//! file is the `fairness` preset. Deadlines left out are derived from the
//! cost model (see [`Calibration`]).

use serde::{Deserialize, Serialize};

use crate::agents::{AdversarySpec, Behavior, MinerProfile, SubmitterConfig};
use crate::consensus::RoundConfig;
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, Hyperparams};
use crate::rng::{stream_seed, Stream};
use crate::sim::{
    data::partition_sizes, partition_data, split_validation, synthetic_dataset, CostModel, CostParams,
    DatasetSpec, Partition, SimConfig,
};
use crate::{MinerId, Tick};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub rounds: u64,
    /// 0 lets the thread pool pick.
    pub threads: usize,
    pub data: DataSection,
    pub partition: Partition,
    pub model: ModelSection,
    pub round: RoundSection,
    pub miners: MinerSection,
    pub cost: CostParams,
    pub submitter: SubmitterConfig,
    pub ledger: LedgerSection,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 42,
            rounds: 20,
            threads: 0,
            data: DataSection::default(),
            partition: Partition::default(),
            model: ModelSection::default(),
            round: RoundSection::default(),
            miners: MinerSection::default(),
            cost: CostParams::default(),
            submitter: SubmitterConfig::default(),
            ledger: LedgerSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dim: usize,
    pub classes: usize,
    pub records: usize,
    pub sigma: f64,
    pub center_scale: f64,
    /// Share of generated records kept back as the global validation set.
    pub validation_fraction: f64,
    /// Share of each miner's records reserved for proposing test records.
    pub holdout_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        Self {
            dim: spec.dim,
            classes: spec.classes,
            records: spec.records,
            sigma: spec.sigma,
            center_scale: spec.center_scale,
            validation_fraction: 0.2,
            holdout_fraction: 0.2,
        }
    }
}

impl DataSection {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            dim: self.dim,
            classes: self.classes,
            records: self.records,
            sigma: self.sigma,
            center_scale: self.center_scale,
            ..DatasetSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let h = Hyperparams::default();
        Self {
            arch: vec![8, 16, 4],
            learning_rate: h.learning_rate,
            epochs: h.epochs,
            batch_size: h.batch_size,
        }
    }
}

impl ModelSection {
    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundSection {
    pub k: usize,
    pub block_reward: f64,
    pub test_records_per_miner: usize,
    pub model_deadline: Option<Tick>,
    pub pred_deadline: Option<Tick>,
    pub vote_deadline: Option<Tick>,
    /// Multiplier for derived model and prediction deadlines.
    pub safety_factor: f64,
    pub vote_safety_factor: f64,
}

impl Default for RoundSection {
    fn default() -> Self {
        Self {
            k: 5,
            block_reward: 100.0,
            test_records_per_miner: 10,
            model_deadline: None,
            pred_deadline: None,
            vote_deadline: None,
            safety_factor: 1.5,
            vote_safety_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinerSection {
    pub count: usize,
    /// 1-based ids of adversarial miners.
    pub adversaries: Vec<u32>,
    pub adversary: AdversarySpec,
    /// One speed multiplier per miner; empty means all 1.0.
    pub compute_factors: Vec<f64>,
}

impl Default for MinerSection {
    fn default() -> Self {
        Self {
            count: 10,
            adversaries: Vec::new(),
            adversary: AdversarySpec::default(),
            compute_factors: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedgerSection {
    /// Funded user accounts `user-1 ..= user-N` the submitter draws from.
    pub accounts: usize,
    pub initial_balance: f64,
    pub txs_per_miner: usize,
}

impl Default for LedgerSection {
    fn default() -> Self {
        Self {
            accounts: 8,
            initial_balance: 1000.0,
            txs_per_miner: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Fairness,
    KnnAttack,
    BaselineEven,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Fairness, Preset::KnnAttack, Preset::BaselineEven];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fairness => "fairness",
            Preset::KnnAttack => "knn-attack",
            Preset::BaselineEven => "baseline-even",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset `{name}` (expected fairness, knn-attack or baseline-even)"
                ))
            })
    }

    pub fn scenario(self) -> Scenario {
        let mut s = Scenario::default();
        match self {
            Preset::Fairness => {}
            Preset::KnnAttack => s.miners.adversaries = vec![1, 6],
            Preset::BaselineEven => s.partition = Partition::Even,
        }
        s
    }
}

/// A validation failure tied to a config key such as `round.k`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyError {
    pub key: &'static str,
    pub message: String,
}

fn key_err(key: &'static str, message: impl Into<String>) -> KeyError {
    KeyError {
        key,
        message: message.into(),
    }
}

impl Scenario {
    /// Parses and validates. Errors carry the line of the offending key
    /// when it appears in `text`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        scenario.check().map_err(|e| {
            let loc = locate_key(text, e.key).map_or_else(String::new, |l| format!("line {l}: "));
            Error::Config(format!("{loc}{}: {}", e.key, e.message))
        })?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn check(&self) -> Result<(), KeyError> {
        if self.rounds == 0 {
            return Err(key_err("rounds", "must be at least 1"));
        }
        let n = self.miners.count;
        if n == 0 {
            return Err(key_err("miners.count", "roster is empty"));
        }
        if let Some(bad) = self.miners.adversaries.iter().find(|&&a| a == 0 || a as usize > n) {
            return Err(key_err("miners.adversaries", format!("id {bad} is not in 1..={n}")));
        }
        if !self.miners.adversaries.is_empty() {
            self.miners
                .adversary
                .validate()
                .map_err(|e| key_err("miners.adversary", e.to_string()))?;
        }
        let factors = &self.miners.compute_factors;
        if !factors.is_empty() && factors.len() != n {
            return Err(key_err(
                "miners.compute_factors",
                format!("{} entries for {n} miners", factors.len()),
            ));
        }
        if factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(key_err("miners.compute_factors", "factors must be positive"));
        }
        if self.round.k == 0 || self.round.k > n {
            return Err(key_err("round.k", format!("must be in 1..={n}, got {}", self.round.k)));
        }
        if !(self.round.block_reward.is_finite() && self.round.block_reward >= 0.0) {
            return Err(key_err("round.block_reward", "must be non-negative"));
        }
        if self.round.test_records_per_miner == 0 {
            return Err(key_err("round.test_records_per_miner", "must be at least 1"));
        }
        for (key, value) in [
            ("round.model_deadline", self.round.model_deadline),
            ("round.pred_deadline", self.round.pred_deadline),
            ("round.vote_deadline", self.round.vote_deadline),
        ] {
            if value == Some(0) {
                return Err(key_err(key, "must be positive"));
            }
        }
        for (key, value) in [
            ("round.safety_factor", self.round.safety_factor),
            ("round.vote_safety_factor", self.round.vote_safety_factor),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(key_err(key, "must be positive"));
            }
        }
        self.data.spec().validate().map_err(|e| key_err("data", e.to_string()))?;
        if !(self.data.validation_fraction > 0.0 && self.data.validation_fraction < 1.0) {
            return Err(key_err("data.validation_fraction", "must be in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(key_err("data.holdout_fraction", "must be in [0, 1)"));
        }
        let arch = ArchSpec::new(self.model.arch.clone()).map_err(|e| key_err("model.arch", e.to_string()))?;
        if arch.input_dim() != self.data.dim || arch.output_dim() != self.data.classes {
            return Err(key_err(
                "model.arch",
                format!(
                    "must start at data.dim = {} and end at data.classes = {}",
                    self.data.dim, self.data.classes
                ),
            ));
        }
        self.model.hyperparams().validate().map_err(|e| key_err("model", e.to_string()))?;
        let train_pool = self.data.records - validation_count(self.data.records, self.data.validation_fraction);
        let sizes = partition_sizes(&self.partition, train_pool, n).map_err(|e| key_err("partition", e.to_string()))?;
        if sizes.iter().any(|&s| s < 2) {
            return Err(key_err("partition", "every miner needs at least two records"));
        }
        CostModel::for_arch(&self.cost, &arch).map_err(|e| key_err("cost", e.to_string()))?;
        self.submitter.validate().map_err(|e| key_err("submitter", e.to_string()))?;
        if self.submitter.rate_per_round > 0 && self.ledger.accounts < 2 {
            return Err(key_err("ledger.accounts", "the submitter needs at least two accounts"));
        }
        if !(self.ledger.initial_balance.is_finite() && self.ledger.initial_balance >= 0.0) {
            return Err(key_err("ledger.initial_balance", "must be non-negative"));
        }
        Ok(())
    }

    /// Generates data, partitions it and resolves deadlines.
    pub fn build(&self) -> Result<SimConfig> {
        self.check()
            .map_err(|e| Error::Config(format!("{}: {}", e.key, e.message)))?;
        let arch = ArchSpec::new(self.model.arch.clone())?;
        let full = synthetic_dataset(&self.data.spec(), stream_seed(self.seed, Stream::Dataset, &[]))?;
        let (pool, validation) = split_validation(
            full,
            self.data.validation_fraction,
            stream_seed(self.seed, Stream::Validation, &[]),
        )?;
        let n = self.miners.count;
        let parts = partition_data(&pool, &self.partition, n, stream_seed(self.seed, Stream::Partition, &[]))?;
        let miners = parts
            .into_iter()
            .enumerate()
            .map(|(i, data)| {
                let id = MinerId(i as u32 + 1);
                let behavior = if self.miners.adversaries.contains(&id.0) {
                    Behavior::Adversary(self.miners.adversary)
                } else {
                    Behavior::Honest
                };
                let factor = self.miners.compute_factors.get(i).copied().unwrap_or(1.0);
                MinerProfile::new(id, behavior, data, self.model.hyperparams(), factor, self.data.holdout_fraction)
            })
            .collect::<Result<Vec<_>>>()?;
        let cost = CostModel::for_arch(&self.cost, &arch)?;
        let cal = Calibration::compute(&miners, &cost, &arch, self.round.test_records_per_miner)?;
        let round_config = RoundConfig {
            k: self.round.k,
            model_deadline: self
                .round
                .model_deadline
                .unwrap_or_else(|| scaled(cal.train_max, self.round.safety_factor)),
            pred_deadline: self
                .round
                .pred_deadline
                .unwrap_or_else(|| scaled(cal.forward_mean, self.round.safety_factor)),
            vote_deadline: self
                .round
                .vote_deadline
                .unwrap_or_else(|| scaled(cal.vote_max, self.round.vote_safety_factor)),
            block_reward: self.round.block_reward,
            test_records_per_miner: self.round.test_records_per_miner,
        };
        Ok(SimConfig {
            seed: self.seed,
            rounds: self.rounds,
            arch,
            miners,
            validation,
            round_config,
            cost,
            submitter: self.submitter.clone(),
            txs_per_miner: self.ledger.txs_per_miner,
            initial_balances: (1..=self.ledger.accounts)
                .map(|i| (format!("user-{i}"), self.ledger.initial_balance))
                .collect(),
            threads: self.threads,
        })
    }
}

fn validation_count(records: usize, fraction: f64) -> usize {
    ((records as f64 * fraction).round() as usize).clamp(1, records.saturating_sub(1).max(1))
}

fn scaled(cost: f64, factor: f64) -> Tick {
    (cost * factor).ceil().max(1.0) as Tick
}

/// Expected (noise-free) phase costs over the roster, assuming every miner
/// takes part. Training and forward costs are what an honest miner would
/// spend, whatever the miner's actual behaviour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub forward_mean: f64,
    pub forward_max: f64,
    pub train_mean: f64,
    pub train_max: f64,
    pub vote_max: f64,
    pub safety_factor: f64,
}

impl Calibration {
    pub fn compute(
        miners: &[MinerProfile],
        cost: &CostModel,
        arch: &ArchSpec,
        test_records: usize,
    ) -> Result<Self> {
        if miners.is_empty() {
            return Err(Error::Config("cannot calibrate an empty roster".into()));
        }
        let n = miners.len();
        let dim = arch.input_dim();
        let n_test = (n - 1) * test_records;
        let forward: Vec<f64> = miners
            .iter()
            .map(|m| cost.forward_work(n_test, dim) * m.compute_factor)
            .collect();
        let train: Vec<f64> = miners
            .iter()
            .map(|m| cost.train_work(m.train_data.len(), dim, m.hyperparams.epochs) * m.compute_factor)
            .collect();
        let vote_max = miners
            .iter()
            .map(|m| cost.vote_work(n - 1, test_records, arch.output_dim()) * m.compute_factor)
            .fold(0.0, f64::max);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            forward_mean: mean(&forward),
            forward_max: max(&forward),
            train_mean: mean(&train),
            train_max: max(&train),
            vote_max,
            safety_factor: 1.5,
        })
    }

    pub fn suggested_pred_deadline(&self) -> Tick {
        scaled(self.forward_mean, self.safety_factor)
    }

    pub fn suggested_model_deadline(&self) -> Tick {
        scaled(self.train_mean, self.safety_factor)
    }
}

/// Calibration for a scenario's roster, with its own safety factor.
pub fn calibrate(scenario: &Scenario) -> Result<Calibration> {
    if scenario.miners.count == 0 {
        return Err(Error::Config("cannot calibrate an empty roster".into()));
    }
    let config = scenario.build()?;
    let mut cal = Calibration::compute(
        &config.miners,
        &config.cost,
        &config.arch,
        scenario.round.test_records_per_miner,
    )?;
    cal.safety_factor = scenario.round.safety_factor;
    Ok(cal)
}

/// 1-based line of `key` (dotted `section.name` or top-level `name`) in a
/// TOML document, if it is written there.
pub fn locate_key(text: &str, key: &str) -> Option<usize> {
    let (section, name) = match key.rsplit_once('.') {
        Some((s, n)) => (s, n),
        None => ("", key),
    };
    let mut current = String::new();
    let mut section_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = header.trim().to_string();
            if current == key {
                section_line = Some(i + 1);
            }
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs = lhs.trim();
        let full = if current.is_empty() {
            lhs.to_string()
        } else {
            format!("{current}.{lhs}")
        };
        if full == key || (current == section && lhs == name) {
            return Some(i + 1);
        }
    }
    section_line
}
