//! Network participants: honest miners, adversarial miners, the requester
//! queue and the transaction submitter.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chain::Transaction;
use crate::consensus::{honest_ranking, VoteBallot};
use crate::error::{Error, Result};
use crate::fl::{digest_model, ModelDigest};
use crate::nn::{self, ArchSpec, Dataset, Hyperparams, ModelParams, Record, PROB_FLOOR};
use crate::rng::{rng_from, stream_seed, Stream};
use crate::sim::data::DatasetSpec;
use crate::{MinerId, Tick};

/// The three malicious actions an adversary can take; any subset may be on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarySpec {
    /// Submit an all-zero model instead of training.
    pub zero_weights: bool,
    /// Answer prediction requests with k-nearest neighbours.
    pub knn_predictor: bool,
    pub knn_k: usize,
    /// Rank predictions worst-first.
    pub reversed_voting: bool,
}

impl Default for AdversarySpec {
    fn default() -> Self {
        Self {
            zero_weights: true,
            knn_predictor: true,
            knn_k: 5,
            reversed_voting: true,
        }
    }
}

impl AdversarySpec {
    pub fn validate(&self) -> Result<()> {
        if !self.zero_weights && !self.knn_predictor && !self.reversed_voting {
            return Err(Error::Config("adversary must enable at least one behaviour".into()));
        }
        if self.knn_predictor && self.knn_k == 0 {
            return Err(Error::Config("knn k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn knn(&self) -> Option<usize> {
        self.knn_predictor.then_some(self.knn_k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Behavior {
    Honest,
    Adversary(AdversarySpec),
}

impl Behavior {
    pub fn is_adversary(&self) -> bool {
        matches!(self, Behavior::Adversary(_))
    }

    fn adversary(&self) -> Option<&AdversarySpec> {
        match self {
            Behavior::Adversary(spec) => Some(spec),
            Behavior::Honest => None,
        }
    }
}

/// A miner's private state: its training split, the held-out slice it draws
/// test records from, and how fast it computes.
#[derive(Debug, Clone)]
pub struct MinerProfile {
    pub id: MinerId,
    pub behavior: Behavior,
    pub train_data: Dataset,
    pub holdout: Vec<Record>,
    pub hyperparams: Hyperparams,
    pub compute_factor: f64,
}

impl MinerProfile {
    /// Splits `local_data` into a training part and a held-out tail of
    /// `round(len * holdout_fraction)` records (at least one when the data
    /// has two or more records).
    pub fn new(
        id: MinerId,
        behavior: Behavior,
        local_data: Dataset,
        hyperparams: Hyperparams,
        compute_factor: f64,
        holdout_fraction: f64,
    ) -> Result<Self> {
        if !(compute_factor.is_finite() && compute_factor > 0.0) {
            return Err(Error::Config(format!(
                "miner {id}: compute_factor must be positive"
            )));
        }
        if !(0.0..1.0).contains(&holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        if let Some(spec) = behavior.adversary() {
            spec.validate()?;
        }
        hyperparams.validate()?;
        let (dim, classes) = (local_data.dim(), local_data.classes());
        let mut records = local_data.into_records();
        let n = records.len();
        let mut held = (n as f64 * holdout_fraction).round() as usize;
        if holdout_fraction > 0.0 && n >= 2 {
            held = held.max(1);
        }
        held = held.min(n - 1);
        let holdout = records.split_off(n - held);
        Ok(Self {
            id,
            behavior,
            train_data: Dataset::new(dim, classes, records)?,
            holdout,
            hyperparams,
            compute_factor,
        })
    }
}

/// Test records a miner puts up for others to predict, with the labels it
/// keeps to itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSample {
    pub records: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub with_replacement: bool,
}

#[derive(Debug, Clone)]
pub struct MineOutput {
    pub model: ModelParams,
    pub digest: ModelDigest,
    pub sample: TestSample,
}

fn sample_test_records(profile: &MinerProfile, count: usize, seed: u64) -> Result<TestSample> {
    let pool: &[Record] = if profile.holdout.is_empty() {
        profile.train_data.records()
    } else {
        &profile.holdout
    };
    let mut rng = rng_from(seed);
    let (picked, with_replacement): (Vec<usize>, bool) = if pool.len() >= count {
        (sample(&mut rng, pool.len(), count).into_vec(), false)
    } else {
        ((0..count).map(|_| rng.random_range(0..pool.len())).collect(), true)
    };
    if pool.is_empty() {
        return Err(Error::Behavior {
            miner: profile.id,
            reason: "no local records to propose".into(),
        });
    }
    Ok(TestSample {
        records: picked.iter().map(|&i| pool[i].features.clone()).collect(),
        labels: picked.iter().map(|&i| pool[i].label).collect(),
        with_replacement,
    })
}

/// Trains the global model on local data and commits to it.
pub fn honest_mine(
    profile: &MinerProfile,
    global: &ModelParams,
    round_seed: u64,
    test_records: usize,
) -> Result<MineOutput> {
    let id = profile.id.0 as u64;
    let model = nn::train_epochs(
        global,
        &profile.train_data,
        &profile.hyperparams,
        stream_seed(round_seed, Stream::Train, &[id]),
    )?;
    let sample = sample_test_records(
        profile,
        test_records,
        stream_seed(round_seed, Stream::TestSample, &[id]),
    )?;
    Ok(MineOutput {
        digest: digest_model(&model),
        model,
        sample,
    })
}

/// Skips training and commits to an all-zero model. The digest is honest,
/// so the aggregator's integrity check passes.
pub fn adversary_mine(
    profile: &MinerProfile,
    global: &ModelParams,
    round_seed: u64,
    test_records: usize,
) -> Result<MineOutput> {
    let model = ModelParams::zeros(global.arch());
    let sample = sample_test_records(
        profile,
        test_records,
        stream_seed(round_seed, Stream::TestSample, &[profile.id.0 as u64]),
    )?;
    Ok(MineOutput {
        digest: digest_model(&model),
        model,
        sample,
    })
}

/// Dispatches to the behaviour configured for the miner.
pub fn mine(
    profile: &MinerProfile,
    global: &ModelParams,
    round_seed: u64,
    test_records: usize,
) -> Result<MineOutput> {
    match profile.behavior.adversary() {
        Some(spec) if spec.zero_weights => adversary_mine(profile, global, round_seed, test_records),
        _ => honest_mine(profile, global, round_seed, test_records),
    }
}

pub fn honest_predict(trained: &ModelParams, records: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    nn::forward(trained, records)
}

/// Brute-force Euclidean k-NN over the miner's training data. Each output
/// row is the label frequency among the `k` nearest records; distance ties
/// go to the lower record index.
pub fn knn_predict(profile: &MinerProfile, records: &[Vec<f64>], k: usize) -> Result<Vec<Vec<f64>>> {
    let train = profile.train_data.records();
    if train.is_empty() {
        return Err(Error::Behavior {
            miner: profile.id,
            reason: "knn needs local training data".into(),
        });
    }
    if k == 0 || k > train.len() {
        return Err(Error::Behavior {
            miner: profile.id,
            reason: format!("knn k = {k} but only {} local records", train.len()),
        });
    }
    let classes = profile.train_data.classes();
    let dim = profile.train_data.dim();
    records
        .iter()
        .map(|q| {
            if q.len() != dim {
                return Err(Error::shape(format!("{dim} features"), q.len()));
            }
            let mut dists: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let d: f64 = r.features.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, i)
                })
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut row = vec![0.0; classes];
            for &(_, i) in &dists[..k] {
                row[train[i].label] += 1.0;
            }
            for v in &mut row {
                *v /= k as f64;
            }
            Ok(row)
        })
        .collect()
}

/// Honest forward pass, or k-NN when the adversary flag is set.
pub fn predict(profile: &MinerProfile, trained: &ModelParams, records: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    match profile.behavior.adversary().and_then(AdversarySpec::knn) {
        Some(k) => {
            let mut rows = knn_predict(profile, records, k.min(profile.train_data.len()))?;
            // pad to the global model's class count if local data saw fewer
            let c = trained.arch().output_dim();
            for row in &mut rows {
                row.resize(c, 0.0);
            }
            Ok(rows)
        }
        None => honest_predict(trained, records),
    }
}

fn prediction_losses(
    predictions: &BTreeMap<MinerId, Vec<Vec<f64>>>,
    labels: &[usize],
) -> Result<BTreeMap<MinerId, f64>> {
    predictions
        .iter()
        .map(|(&m, probs)| {
            let clamped: Vec<Vec<f64>> = probs
                .iter()
                .map(|row| row.iter().map(|p| p.max(PROB_FLOOR)).collect())
                .collect();
            Ok((m, nn::loss(&clamped, labels)?))
        })
        .collect()
}

/// Ranks peers by loss on the voter's own records, earlier submission
/// breaking ties.
pub fn honest_vote(
    voter: MinerId,
    labels: &[usize],
    predictions: &BTreeMap<MinerId, Vec<Vec<f64>>>,
    times: &BTreeMap<MinerId, Tick>,
) -> Result<VoteBallot> {
    let losses = prediction_losses(predictions, labels)?;
    Ok(VoteBallot {
        voter,
        ranking: honest_ranking(&losses, times),
    })
}

/// The honest ballot, reversed.
pub fn adversary_vote(
    voter: MinerId,
    labels: &[usize],
    predictions: &BTreeMap<MinerId, Vec<Vec<f64>>>,
    times: &BTreeMap<MinerId, Tick>,
) -> Result<VoteBallot> {
    let mut ballot = honest_vote(voter, labels, predictions, times)?;
    ballot.ranking.reverse();
    Ok(ballot)
}

pub fn vote(
    profile: &MinerProfile,
    labels: &[usize],
    predictions: &BTreeMap<MinerId, Vec<Vec<f64>>>,
    times: &BTreeMap<MinerId, Tick>,
) -> Result<VoteBallot> {
    match profile.behavior.adversary() {
        Some(spec) if spec.reversed_voting => adversary_vote(profile.id, labels, predictions, times),
        _ => honest_vote(profile.id, labels, predictions, times),
    }
}

/// A training job from a requester.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub arch: ArchSpec,
    pub dataset: DatasetSpec,
    pub dataset_seed: u64,
    pub rounds: u64,
}

impl TaskRequest {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("a task needs at least one round".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RequestQueue {
    queue: VecDeque<TaskRequest>,
}

impl RequestQueue {
    pub fn push(&mut self, task: TaskRequest) -> Result<()> {
        task.validate()?;
        self.queue.push_back(task);
        Ok(())
    }

    pub fn next_task(&mut self) -> Option<TaskRequest> {
        self.queue.pop_front()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubmitterConfig {
    pub rate_per_round: usize,
    pub min_amount: f64,
    pub max_amount: f64,
}

impl Default for SubmitterConfig {
    fn default() -> Self {
        Self {
            rate_per_round: 20,
            min_amount: 1.0,
            max_amount: 50.0,
        }
    }
}

impl SubmitterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_amount.is_finite() && self.min_amount > 0.0 && self.max_amount >= self.min_amount) {
            return Err(Error::Config(format!(
                "submitter amounts must satisfy 0 < min <= max, got [{}, {}]",
                self.min_amount, self.max_amount
            )));
        }
        Ok(())
    }
}

/// Generates `rate_per_round` transfers between distinct random accounts,
/// amounts rounded to cents.
pub fn submitter_tick(
    cfg: &SubmitterConfig,
    round: u64,
    round_seed: u64,
    accounts: &[String],
    now: Tick,
) -> Result<Vec<Transaction>> {
    cfg.validate()?;
    if cfg.rate_per_round == 0 {
        return Ok(Vec::new());
    }
    if accounts.len() < 2 {
        return Err(Error::Config("submitter needs at least two accounts".into()));
    }
    let mut rng = rng_from(stream_seed(round_seed, Stream::Submitter, &[round]));
    let min_cents = (cfg.min_amount * 100.0).ceil() as u64;
    let max_cents = ((cfg.max_amount * 100.0).floor() as u64).max(min_cents);
    Ok((0..cfg.rate_per_round)
        .map(|i| {
            let from = rng.random_range(0..accounts.len());
            let mut to = rng.random_range(0..accounts.len() - 1);
            if to >= from {
                to += 1;
            }
            let cents = rng.random_range(min_cents..=max_cents);
            Transaction {
                id: format!("tx-{round}-{i}"),
                from: accounts[from].clone(),
                to: accounts[to].clone(),
                amount: cents as f64 / 100.0,
                submitted_at: now,
            }
        })
        .collect())
}
