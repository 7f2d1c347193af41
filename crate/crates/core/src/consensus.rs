//! The per-round phase machine: model proposals, cross-predictions, ranked
//! ballots, Borda tally, top-K selection and finalisation.
//!
//! Phase windows are contiguous, inclusive tick ranges:
//!
//! ```text
//! model:      [start,          start + model_deadline]
//! prediction: [model_close+1,  model_close+1 + pred_deadline]
//! vote:       [pred_close+1,   pred_close+1 + vote_deadline]
//! ```
//!
//! A submission is on time iff its `submitted_at` lies inside the window of
//! the phase it belongs to. The simulator delivers late submissions anyway;
//! they are rejected here.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::chain::{Block, Ledger};
use crate::error::{Error, Result};
use crate::fl::{self, compute_contribution, digest_model, distribute_rewards, ModelDigest, RewardReport};
use crate::nn::ModelParams;
use crate::{MinerId, Tick};

const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    /// Winners per round.
    pub k: usize,
    pub model_deadline: Tick,
    pub pred_deadline: Tick,
    pub vote_deadline: Tick,
    pub block_reward: f64,
    pub test_records_per_miner: usize,
}

impl RoundConfig {
    pub fn validate(&self, miner_count: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.k > miner_count {
            return Err(Error::Config(format!(
                "k = {} exceeds the {miner_count} miners in the roster",
                self.k
            )));
        }
        if self.model_deadline == 0 || self.pred_deadline == 0 || self.vote_deadline == 0 {
            return Err(Error::Config("deadlines must be positive".into()));
        }
        if !(self.block_reward.is_finite() && self.block_reward >= 0.0) {
            return Err(Error::Config("block_reward must be non-negative".into()));
        }
        if self.test_records_per_miner == 0 {
            return Err(Error::Config("test_records_per_miner must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    ModelProposal,
    Prediction,
    Vote,
    Tally,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseWindows {
    pub start: Tick,
    pub model_close: Tick,
    pub pred_open: Tick,
    pub pred_close: Tick,
    pub vote_open: Tick,
    pub vote_close: Tick,
}

impl PhaseWindows {
    fn new(start: Tick, cfg: &RoundConfig) -> Self {
        let model_close = start + cfg.model_deadline;
        let pred_open = model_close + 1;
        let pred_close = pred_open + cfg.pred_deadline;
        let vote_open = pred_close + 1;
        let vote_close = vote_open + cfg.vote_deadline;
        Self {
            start,
            model_close,
            pred_open,
            pred_close,
            vote_open,
            vote_close,
        }
    }

    /// First tick after the round.
    pub fn end(&self) -> Tick {
        self.vote_close + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NotifyKind {
    Mine,
    Predict,
    Vote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub miner: MinerId,
    pub kind: NotifyKind,
    pub at: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProposal {
    pub miner: MinerId,
    pub digest: ModelDigest,
    /// Unlabelled feature vectors; the labels stay with the proposer.
    pub test_records: Vec<Vec<f64>>,
    pub submitted_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub predictor: MinerId,
    /// Owner of the records being predicted.
    pub target: MinerId,
    pub probs: Vec<Vec<f64>>,
    pub submitted_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteBallot {
    pub voter: MinerId,
    /// Best first.
    pub ranking: Vec<MinerId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rejection {
    Late,
    Malformed(String),
    Duplicate,
    WrongPhase,
    NotParticipant,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::Late => f.write_str("late"),
            Rejection::Malformed(why) => write!(f, "malformed: {why}"),
            Rejection::Duplicate => f.write_str("duplicate"),
            Rejection::WrongPhase => f.write_str("wrong phase"),
            Rejection::NotParticipant => f.write_str("not a participant"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArtifactKind {
    Model,
    Prediction,
    Ballot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionEntry {
    pub miner: MinerId,
    pub kind: ArtifactKind,
    pub reason: Rejection,
}

/// Total order used inside a ballot: lower loss first, then earlier
/// submission, then lower miner id. Missing times sort last.
pub fn honest_ranking(
    losses: &BTreeMap<MinerId, f64>,
    times: &BTreeMap<MinerId, Tick>,
) -> Vec<MinerId> {
    let mut ids: Vec<MinerId> = losses.keys().copied().collect();
    ids.sort_by(|a, b| {
        losses[a]
            .total_cmp(&losses[b])
            .then_with(|| {
                let ta = times.get(a).copied().unwrap_or(Tick::MAX);
                let tb = times.get(b).copied().unwrap_or(Tick::MAX);
                ta.cmp(&tb)
            })
            .then_with(|| a.cmp(b))
    });
    ids
}

/// Borda points: a ballot ranking `m` predictors gives `m-1` to the first
/// down to 0 for the last.
pub fn borda_points<'a>(ballots: impl IntoIterator<Item = &'a VoteBallot>) -> BTreeMap<MinerId, u64> {
    let mut points = BTreeMap::new();
    for ballot in ballots {
        let m = ballot.ranking.len() as u64;
        for (pos, miner) in ballot.ranking.iter().enumerate() {
            *points.entry(*miner).or_insert(0) += m - 1 - pos as u64;
        }
    }
    points
}

/// Sum and count of a miner's on-time prediction timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeStats {
    pub sum: u128,
    pub count: u64,
}

impl TimeStats {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::INFINITY
        } else {
            self.sum as f64 / self.count as f64
        }
    }

    /// Exact comparison of means; a miner without timestamps is latest.
    fn cmp_mean(&self, other: &Self) -> Ordering {
        match (self.count, other.count) {
            (0, 0) => Ordering::Equal,
            (0, _) => Ordering::Greater,
            (_, 0) => Ordering::Less,
            _ => (self.sum * other.count as u128).cmp(&(other.sum * self.count as u128)),
        }
    }
}

/// Orders candidates by points (desc), mean prediction time (asc), id (asc).
pub fn rank_candidates(
    points: &BTreeMap<MinerId, u64>,
    times: &BTreeMap<MinerId, TimeStats>,
) -> Vec<MinerId> {
    let none = TimeStats { sum: 0, count: 0 };
    let mut ids: Vec<MinerId> = points.keys().copied().collect();
    ids.sort_by(|a, b| {
        points[b]
            .cmp(&points[a])
            .then_with(|| {
                let ta = times.get(a).unwrap_or(&none);
                let tb = times.get(b).unwrap_or(&none);
                ta.cmp_mean(tb)
            })
            .then_with(|| a.cmp(b))
    });
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TallyOutcome {
    pub tally: BTreeMap<MinerId, u64>,
    pub mean_pred_time: BTreeMap<MinerId, f64>,
    /// Every eligible miner in selection order.
    pub ranking: Vec<MinerId>,
    pub winners: Vec<MinerId>,
}

/// Audit trail of one finalised round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub global_in: ModelDigest,
    pub proposals: Vec<ModelProposal>,
    pub predictions: Vec<PredictionSet>,
    pub ballots: Vec<VoteBallot>,
    pub rejections: Vec<RejectionEntry>,
    pub tally: Vec<(MinerId, u64)>,
    pub winners: Vec<MinerId>,
    pub disqualified: Vec<MinerId>,
    pub rewards: RewardReport,
    pub global_out: ModelDigest,
    pub block_hash: String,
}

#[derive(Debug, Clone)]
pub struct FinalizedRound {
    pub record: RoundRecord,
    pub global_out: ModelParams,
    pub block: Block,
    pub minted: f64,
    pub dropped_transactions: Vec<String>,
}

/// State of one consensus round.
#[derive(Debug, Clone)]
pub struct RoundContext {
    round: u64,
    config: RoundConfig,
    windows: PhaseWindows,
    phase: Phase,
    global_in: ModelParams,
    global_in_digest: ModelDigest,
    roster: BTreeSet<MinerId>,
    notifications: Vec<Notification>,
    assignments: BTreeMap<MinerId, Vec<String>>,
    proposals: BTreeMap<MinerId, ModelProposal>,
    /// Keyed by (target, predictor).
    predictions: BTreeMap<(MinerId, MinerId), PredictionSet>,
    ballots: BTreeMap<MinerId, VoteBallot>,
    rejections: Vec<RejectionEntry>,
}

/// Starts a round: arms the model deadline and queues one mine
/// notification per miner at `start`.
pub fn open_round(
    config: &RoundConfig,
    round: u64,
    start: Tick,
    global_model: ModelParams,
    miners: &[MinerId],
    assignments: BTreeMap<MinerId, Vec<String>>,
) -> Result<RoundContext> {
    if miners.is_empty() {
        return Err(Error::Config("cannot open a round with no miners".into()));
    }
    config.validate(miners.len())?;
    let roster: BTreeSet<MinerId> = miners.iter().copied().collect();
    if roster.len() != miners.len() {
        return Err(Error::Config("duplicate miner id in roster".into()));
    }
    let notifications = roster
        .iter()
        .map(|&miner| Notification {
            miner,
            kind: NotifyKind::Mine,
            at: start,
        })
        .collect();
    Ok(RoundContext {
        round,
        config: config.clone(),
        windows: PhaseWindows::new(start, config),
        phase: Phase::ModelProposal,
        global_in_digest: digest_model(&global_model),
        global_in: global_model,
        roster,
        notifications,
        assignments,
        proposals: BTreeMap::new(),
        predictions: BTreeMap::new(),
        ballots: BTreeMap::new(),
        rejections: Vec::new(),
    })
}

fn check_probs(probs: &[Vec<f64>], classes: usize) -> Result<(), Rejection> {
    for (i, row) in probs.iter().enumerate() {
        if row.len() != classes {
            return Err(Rejection::Malformed(format!(
                "row {i} has {} entries, expected {classes}",
                row.len()
            )));
        }
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Rejection::Malformed(format!("row {i} has an entry outside [0, 1]")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Rejection::Malformed(format!("row {i} sums to {sum}")));
        }
    }
    Ok(())
}

impl RoundContext {
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn config(&self) -> &RoundConfig {
        &self.config
    }

    pub fn windows(&self) -> PhaseWindows {
        self.windows
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn global_model(&self) -> &ModelParams {
        &self.global_in
    }

    pub fn global_digest(&self) -> &ModelDigest {
        &self.global_in_digest
    }

    pub fn notifications(&self) -> &[Notification] {
        &self.notifications
    }

    pub fn assignments(&self) -> &BTreeMap<MinerId, Vec<String>> {
        &self.assignments
    }

    pub fn proposals(&self) -> &BTreeMap<MinerId, ModelProposal> {
        &self.proposals
    }

    pub fn rejections(&self) -> &[RejectionEntry] {
        &self.rejections
    }

    pub fn ballots(&self) -> &BTreeMap<MinerId, VoteBallot> {
        &self.ballots
    }

    /// Miners whose model proposal was accepted.
    pub fn participants(&self) -> Vec<MinerId> {
        self.proposals.keys().copied().collect()
    }

    fn reject(&mut self, miner: MinerId, kind: ArtifactKind, reason: Rejection) -> Result<(), Rejection> {
        self.rejections.push(RejectionEntry {
            miner,
            kind,
            reason: reason.clone(),
        });
        Err(reason)
    }

    fn timing(&self, phase: Phase, open: Tick, close: Tick, at: Tick) -> Result<(), Rejection> {
        if at > close {
            return Err(Rejection::Late);
        }
        if self.phase != phase || at < open {
            return Err(Rejection::WrongPhase);
        }
        Ok(())
    }

    pub fn accept_model_proposal(&mut self, proposal: ModelProposal) -> Result<(), Rejection> {
        let miner = proposal.miner;
        let verdict = self.check_model_proposal(&proposal);
        if let Err(reason) = verdict {
            return self.reject(miner, ArtifactKind::Model, reason);
        }
        self.proposals.insert(miner, proposal);
        Ok(())
    }

    fn check_model_proposal(&self, p: &ModelProposal) -> Result<(), Rejection> {
        let w = self.windows;
        self.timing(Phase::ModelProposal, w.start, w.model_close, p.submitted_at)?;
        if !self.roster.contains(&p.miner) {
            return Err(Rejection::NotParticipant);
        }
        if self.proposals.contains_key(&p.miner) {
            return Err(Rejection::Duplicate);
        }
        if p.test_records.len() != self.config.test_records_per_miner {
            return Err(Rejection::Malformed(format!(
                "{} test records, expected {}",
                p.test_records.len(),
                self.config.test_records_per_miner
            )));
        }
        let d = self.global_in.arch().input_dim();
        if p.test_records.iter().any(|r| r.len() != d) {
            return Err(Rejection::Malformed(format!("test record width differs from {d}")));
        }
        Ok(())
    }

    /// Closes the model phase and queues predict notifications for every
    /// participant.
    pub fn close_model_phase(&mut self) {
        if self.phase != Phase::ModelProposal {
            return;
        }
        self.phase = Phase::Prediction;
        let at = self.windows.pred_open;
        let participants = self.participants();
        self.notifications.extend(participants.into_iter().map(|miner| Notification {
            miner,
            kind: NotifyKind::Predict,
            at,
        }));
    }

    /// Test records a participant must predict: every other participant's.
    pub fn records_for(&self, predictor: MinerId) -> Vec<(MinerId, &[Vec<f64>])> {
        self.proposals
            .iter()
            .filter(|(&target, _)| target != predictor)
            .map(|(&target, p)| (target, p.test_records.as_slice()))
            .collect()
    }

    pub fn accept_prediction(&mut self, pred: PredictionSet) -> Result<(), Rejection> {
        let predictor = pred.predictor;
        if let Err(reason) = self.check_prediction(&pred) {
            return self.reject(predictor, ArtifactKind::Prediction, reason);
        }
        self.predictions.insert((pred.target, pred.predictor), pred);
        Ok(())
    }

    fn check_prediction(&self, pred: &PredictionSet) -> Result<(), Rejection> {
        let w = self.windows;
        self.timing(Phase::Prediction, w.pred_open, w.pred_close, pred.submitted_at)?;
        if pred.predictor == pred.target {
            return Err(Rejection::Malformed("self-prediction".into()));
        }
        if !self.proposals.contains_key(&pred.predictor) {
            return Err(Rejection::NotParticipant);
        }
        let target = self
            .proposals
            .get(&pred.target)
            .ok_or_else(|| Rejection::Malformed(format!("unknown target {}", pred.target)))?;
        if self.predictions.contains_key(&(pred.target, pred.predictor)) {
            return Err(Rejection::Duplicate);
        }
        if pred.probs.len() != target.test_records.len() {
            return Err(Rejection::Malformed(format!(
                "{} rows for {} records",
                pred.probs.len(),
                target.test_records.len()
            )));
        }
        check_probs(&pred.probs, self.global_in.arch().output_dim())
    }

    pub fn close_prediction_phase(&mut self) {
        if self.phase != Phase::Prediction {
            return;
        }
        self.phase = Phase::Vote;
        let at = self.windows.vote_open;
        let participants = self.participants();
        self.notifications.extend(participants.into_iter().map(|miner| Notification {
            miner,
            kind: NotifyKind::Vote,
            at,
        }));
    }

    /// On-time predictions of `voter`'s records, keyed by predictor.
    pub fn predictions_for(&self, voter: MinerId) -> BTreeMap<MinerId, &PredictionSet> {
        self.predictions
            .range((voter, MinerId(0))..=(voter, MinerId(u32::MAX)))
            .map(|((_, predictor), p)| (*predictor, p))
            .collect()
    }

    pub fn accept_ballot(&mut self, ballot: VoteBallot) -> Result<(), Rejection> {
        let voter = ballot.voter;
        if let Err(reason) = self.check_ballot(&ballot) {
            return self.reject(voter, ArtifactKind::Ballot, reason);
        }
        self.ballots.insert(voter, ballot);
        Ok(())
    }

    /// Ballots carry no timestamp of their own; the caller passes the tick at
    /// which it was delivered.
    pub fn accept_ballot_at(&mut self, ballot: VoteBallot, at: Tick) -> Result<(), Rejection> {
        let w = self.windows;
        if let Err(reason) = self.timing(Phase::Vote, w.vote_open, w.vote_close, at) {
            return self.reject(ballot.voter, ArtifactKind::Ballot, reason);
        }
        self.accept_ballot(ballot)
    }

    fn check_ballot(&self, ballot: &VoteBallot) -> Result<(), Rejection> {
        if self.phase != Phase::Vote {
            return Err(Rejection::WrongPhase);
        }
        if !self.proposals.contains_key(&ballot.voter) {
            return Err(Rejection::NotParticipant);
        }
        if self.ballots.contains_key(&ballot.voter) {
            return Err(Rejection::Duplicate);
        }
        if ballot.ranking.contains(&ballot.voter) {
            return Err(Rejection::Malformed("ballot ranks the voter itself".into()));
        }
        let expected: BTreeSet<MinerId> = self.predictions_for(ballot.voter).into_keys().collect();
        let given: BTreeSet<MinerId> = ballot.ranking.iter().copied().collect();
        if given.len() != ballot.ranking.len() {
            return Err(Rejection::Malformed("ballot repeats a miner".into()));
        }
        if given != expected {
            return Err(Rejection::Malformed(format!(
                "ballot ranks {given:?}, on-time predictors are {expected:?}"
            )));
        }
        Ok(())
    }

    pub fn close_vote_phase(&mut self) {
        if self.phase == Phase::Vote {
            self.phase = Phase::Tally;
        }
    }

    fn time_stats(&self) -> BTreeMap<MinerId, TimeStats> {
        let mut stats: BTreeMap<MinerId, TimeStats> = BTreeMap::new();
        for p in self.predictions.values() {
            let s = stats.entry(p.predictor).or_insert(TimeStats { sum: 0, count: 0 });
            s.sum += p.submitted_at as u128;
            s.count += 1;
        }
        stats
    }

    /// Borda tally over accepted ballots and top-K selection. Only miners
    /// ranked on at least one ballot are eligible.
    pub fn tally_and_select(&self) -> Result<TallyOutcome> {
        if self.phase != Phase::Tally {
            return Err(Error::Consistency("tally requested before the vote phase closed".into()));
        }
        let counted: Vec<&VoteBallot> = self
            .ballots
            .values()
            .filter(|b| !b.ranking.is_empty())
            .collect();
        if counted.is_empty() {
            return Err(Error::RoundAborted {
                round: self.round,
                reason: "no ballots ranked any prediction".into(),
            });
        }
        let tally = borda_points(counted);
        let times = self.time_stats();
        let ranking = rank_candidates(&tally, &times);
        let winners = ranking.iter().take(self.config.k).copied().collect();
        let mean_pred_time = tally
            .keys()
            .map(|m| (*m, times.get(m).map_or(f64::INFINITY, TimeStats::mean)))
            .collect();
        Ok(TallyOutcome {
            tally,
            mean_pred_time,
            ranking,
            winners,
        })
    }

    /// Verifies winner models against their proposed digests (replacing
    /// mismatches with the next-ranked miner), aggregates them, pays rewards
    /// against the round-start global model and commits the block.
    pub fn finalize_round(
        &self,
        outcome: &TallyOutcome,
        models: &BTreeMap<MinerId, ModelParams>,
        ledger: &mut Ledger,
    ) -> Result<FinalizedRound> {
        let mut winners = Vec::with_capacity(self.config.k);
        let mut disqualified = Vec::new();
        for &candidate in &outcome.ranking {
            if winners.len() == self.config.k {
                break;
            }
            let verified = match (models.get(&candidate), self.proposals.get(&candidate)) {
                (Some(model), Some(p)) => fl::verify_model(model, &p.digest),
                _ => false,
            };
            if verified {
                winners.push(candidate);
            } else {
                disqualified.push(candidate);
            }
        }
        if winners.is_empty() {
            return Err(Error::RoundAborted {
                round: self.round,
                reason: "every selected winner failed digest verification".into(),
            });
        }

        let winner_models: Vec<ModelParams> = winners.iter().map(|m| models[m].clone()).collect();
        let global_out = fl::fed_avg(&winner_models)?;
        let contributions = winners
            .iter()
            .zip(&winner_models)
            .map(|(&m, model)| Ok((m, compute_contribution(model, &self.global_in)?)))
            .collect::<Result<Vec<_>>>()?;
        let rewards = distribute_rewards(&contributions, self.config.block_reward)?;
        let commit = ledger.commit_block(self.round, &winners, &rewards)?;

        let record = RoundRecord {
            round: self.round,
            global_in: self.global_in_digest.clone(),
            proposals: self.proposals.values().cloned().collect(),
            predictions: self.predictions.values().cloned().collect(),
            ballots: self.ballots.values().cloned().collect(),
            rejections: self.rejections.clone(),
            tally: outcome.tally.iter().map(|(m, p)| (*m, *p)).collect(),
            winners: winners.clone(),
            disqualified,
            rewards,
            global_out: digest_model(&global_out),
            block_hash: commit.block.block_hash.clone(),
        };
        Ok(FinalizedRound {
            record,
            global_out,
            block: commit.block,
            minted: commit.minted,
            dropped_transactions: commit.dropped,
        })
    }
}
