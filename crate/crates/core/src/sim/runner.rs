use std::collections::BTreeMap;

use crate::agents::{self, MineOutput, MinerProfile};
use crate::chain::Ledger;
use crate::consensus::{open_round, ModelProposal, PredictionSet, RoundContext, RoundRecord, VoteBallot};
use crate::error::{Error, Result};
use crate::nn::{self, ModelParams};
use crate::rng::{derive_seed, rng_from, stream_seed, Stream};
use crate::sim::events::EventQueue;
use crate::sim::metrics::{MetricsLog, MetricsRow, RoundMetrics};
use crate::sim::SimConfig;
use crate::{MinerId, Tick};

#[derive(Debug, Clone, PartialEq)]
pub enum SimStatus {
    Completed,
    Aborted { round: u64, reason: String },
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub status: SimStatus,
    pub ledger: Ledger,
    pub metrics: MetricsLog,
    pub records: Vec<RoundRecord>,
    pub final_model: ModelParams,
    pub initial_val_loss: f64,
}

/// What an observer sees right after a block is committed.
#[derive(Debug)]
pub struct RoundView<'a> {
    pub round: u64,
    pub ledger: &'a Ledger,
    pub record: &'a RoundRecord,
    pub minted: f64,
    pub dropped: &'a [String],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Mined(usize),
    Predicted(usize),
    Voted(usize),
    CloseModel,
    ClosePrediction,
    CloseVote,
}

struct Workers {
    #[cfg(feature = "parallel")]
    pool: rayon::ThreadPool,
}

impl Workers {
    fn new(threads: usize) -> Result<Self> {
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(Self { pool })
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            Ok(Self {})
        }
    }

    /// Order-preserving map; results come back indexed like `items`.
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            self.pool.install(|| items.par_iter().map(&f).collect())
        }
        #[cfg(not(feature = "parallel"))]
        {
            items.iter().map(f).collect()
        }
    }
}

pub fn run_simulation(config: &SimConfig) -> Result<SimOutput> {
    run_simulation_observed(config, |_| {})
}

/// Runs every round, calling `observer` after each committed block. A round
/// that cannot produce a block stops the run with [`SimStatus::Aborted`];
/// everything up to that point is returned.
pub fn run_simulation_observed(
    config: &SimConfig,
    mut observer: impl FnMut(&RoundView<'_>),
) -> Result<SimOutput> {
    config.validate()?;
    let workers = Workers::new(config.threads)?;
    let mut ledger = Ledger::with_balances(config.initial_balances.iter().cloned())?;
    let mut global = nn::init_model(&config.arch, stream_seed(config.seed, Stream::Init, &[]));
    let validation_x = config.validation.features();
    let validation_y = config.validation.labels();
    let evaluate = |model: &ModelParams| -> Result<(f64, f64)> {
        let probs = nn::forward(model, &validation_x)?;
        Ok((nn::loss(&probs, &validation_y)?, nn::accuracy(&probs, &validation_y)))
    };
    let initial_val_loss = evaluate(&global)?.0;
    let accounts = config.user_accounts();
    let ids: Vec<MinerId> = config.miners.iter().map(|m| m.id).collect();

    let mut metrics = MetricsLog::default();
    let mut records = Vec::new();
    let mut status = SimStatus::Completed;
    let mut start: Tick = 0;

    for round in 1..=config.rounds {
        let round_seed = derive_seed(config.seed, &[round]);
        for tx in agents::submitter_tick(&config.submitter, round, round_seed, &accounts, start)? {
            ledger.submit_transaction(tx)?;
        }
        let assignments = ledger.assign_transactions(&ids, config.txs_per_miner);
        let ctx = open_round(&config.round_config, round, start, global.clone(), &ids, assignments)?;
        let end = ctx.windows().end();

        let played = play_round(config, &workers, ctx, round_seed)?;
        let outcome = match played.ctx.tally_and_select() {
            Ok(outcome) => outcome,
            Err(Error::RoundAborted { round, reason }) => {
                ledger.release_assignments();
                status = SimStatus::Aborted { round, reason };
                break;
            }
            Err(e) => return Err(e),
        };
        let models: BTreeMap<MinerId, ModelParams> = played
            .mined
            .iter()
            .map(|(&i, out)| (config.miners[i].id, out.model.clone()))
            .collect();
        let finalized = match played.ctx.finalize_round(&outcome, &models, &mut ledger) {
            Ok(f) => f,
            Err(Error::RoundAborted { round, reason }) => {
                ledger.release_assignments();
                status = SimStatus::Aborted { round, reason };
                break;
            }
            Err(e) => return Err(e),
        };
        observer(&RoundView {
            round,
            ledger: &ledger,
            record: &finalized.record,
            minted: finalized.minted,
            dropped: &finalized.dropped_transactions,
        });

        let participants: Vec<(usize, MinerId)> = played
            .ctx
            .participants()
            .into_iter()
            .map(|m| (ids.iter().position(|&x| x == m).expect("roster member"), m))
            .collect();
        let scores = workers.map(&participants, |(i, _)| evaluate(&played.mined[i].model));
        let rec = &finalized.record;
        for ((i, miner), score) in participants.iter().zip(scores) {
            let (val_loss, val_acc) = score?;
            metrics.rows.push(MetricsRow {
                round,
                miner: *miner,
                val_loss,
                val_acc,
                won: rec.winners.contains(miner),
                points: outcome.tally.get(miner).copied().unwrap_or(0),
                reward: rec.rewards.get(*miner).map_or(0.0, |w| w.reward),
                pred_time: played.pred_times.get(i).copied(),
            });
        }
        let (global_val_loss, global_val_acc) = evaluate(&finalized.global_out)?;
        metrics.rounds.push(RoundMetrics {
            round,
            winners: rec.winners.clone(),
            block_hash: rec.block_hash.clone(),
            global_val_loss,
            global_val_acc,
            resampled: played
                .mined
                .iter()
                .filter(|(_, out)| out.sample.with_replacement)
                .map(|(&i, _)| config.miners[i].id)
                .collect(),
        });
        records.push(finalized.record);
        global = finalized.global_out;
        start = end;
    }

    Ok(SimOutput {
        status,
        ledger,
        metrics,
        records,
        final_model: global,
        initial_val_loss,
    })
}

struct PlayedRound {
    ctx: RoundContext,
    mined: BTreeMap<usize, MineOutput>,
    /// Ticks from the prediction phase opening to delivery, late or not.
    pred_times: BTreeMap<usize, Tick>,
}

fn cost_rng(round_seed: u64, stream: Stream, profile: &MinerProfile) -> rand_chacha::ChaCha8Rng {
    rng_from(stream_seed(round_seed, stream, &[profile.id.0 as u64]))
}

/// Drives one round's events from the mine notification to the close of
/// voting. Agent work for a phase runs on the worker pool; deliveries happen
/// in (time, sequence) order, sequence following miner order.
fn play_round(
    config: &SimConfig,
    workers: &Workers,
    mut ctx: RoundContext,
    round_seed: u64,
) -> Result<PlayedRound> {
    let miners = &config.miners;
    let cost = &config.cost;
    let w = ctx.windows();
    let dim = config.arch.input_dim();
    let classes = config.arch.output_dim();
    let test_records = config.round_config.test_records_per_miner;
    let mut queue: EventQueue<Event> = EventQueue::new();

    let global = ctx.global_model().clone();
    let outputs = workers.map(miners, |p| agents::mine(p, &global, round_seed, test_records));
    let mut mined = BTreeMap::new();
    for (i, out) in outputs.into_iter().enumerate() {
        let p = &miners[i];
        let skips_training = matches!(p.behavior, agents::Behavior::Adversary(s) if s.zero_weights);
        let duration = if skips_training {
            1
        } else {
            let mut rng = cost_rng(round_seed, Stream::TrainCost, p);
            cost.train_cost(p.train_data.len(), dim, p.hyperparams.epochs, p.compute_factor, &mut rng)
        };
        queue.schedule(w.start + duration, Event::Mined(i));
        mined.insert(i, out?);
    }
    queue.schedule(w.pred_open, Event::CloseModel);

    let mut inbox = Inbox {
        predictions: BTreeMap::new(),
        ballots: BTreeMap::new(),
        pred_times: BTreeMap::new(),
    };

    while let Some((now, event)) = queue.pop() {
        match event {
            Event::CloseModel => {
                ctx.close_model_phase();
                let predictors: Vec<usize> = participant_indices(&ctx, miners);
                let ctx_ref = &ctx;
                let mined_ref = &mined;
                let results = workers.map(&predictors, |&i| {
                    let p = &miners[i];
                    let batches = ctx_ref.records_for(p.id);
                    let flat: Vec<Vec<f64>> = batches.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
                    let probs = agents::predict(p, &mined_ref[&i].model, &flat)?;
                    let mut rows = probs.into_iter();
                    let split: Vec<(MinerId, Vec<Vec<f64>>)> = batches
                        .iter()
                        .map(|(target, r)| (*target, rows.by_ref().take(r.len()).collect()))
                        .collect();
                    let mut rng = cost_rng(round_seed, Stream::PredictCost, p);
                    let duration = match p.behavior {
                        agents::Behavior::Adversary(s) if s.knn_predictor => {
                            cost.knn_cost(p.train_data.len(), flat.len(), dim, p.compute_factor, &mut rng)
                        }
                        _ => cost.forward_cost(flat.len(), dim, p.compute_factor, &mut rng),
                    };
                    Ok::<_, Error>((split, duration))
                });
                for (&i, result) in predictors.iter().zip(results) {
                    let (split, duration) = result?;
                    inbox.predictions.insert(i, split);
                    queue.schedule(w.pred_open + duration, Event::Predicted(i));
                }
                queue.schedule(w.vote_open, Event::ClosePrediction);
            }
            Event::ClosePrediction => {
                ctx.close_prediction_phase();
                let voters: Vec<usize> = participant_indices(&ctx, miners);
                let ctx_ref = &ctx;
                let mined_ref = &mined;
                let results = workers.map(&voters, |&i| {
                    let p = &miners[i];
                    let received = ctx_ref.predictions_for(p.id);
                    let probs: BTreeMap<MinerId, Vec<Vec<f64>>> =
                        received.iter().map(|(&m, s)| (m, s.probs.clone())).collect();
                    let times: BTreeMap<MinerId, Tick> =
                        received.iter().map(|(&m, s)| (m, s.submitted_at)).collect();
                    let ballot = agents::vote(p, &mined_ref[&i].sample.labels, &probs, &times)?;
                    let mut rng = cost_rng(round_seed, Stream::VoteCost, p);
                    let duration = cost.vote_cost(probs.len(), test_records, classes, p.compute_factor, &mut rng);
                    Ok::<_, Error>((ballot, duration))
                });
                for (&i, result) in voters.iter().zip(results) {
                    let (ballot, duration) = result?;
                    inbox.ballots.insert(i, ballot);
                    queue.schedule(w.vote_open + duration, Event::Voted(i));
                }
                queue.schedule(w.end(), Event::CloseVote);
            }
            Event::CloseVote => {
                ctx.close_vote_phase();
                // anything still queued is past every deadline; deliver it so
                // the rejection is recorded
                while let Some((now, event)) = queue.pop() {
                    inbox.deliver(&mut ctx, miners, &mined, event, now);
                }
                break;
            }
            _ => inbox.deliver(&mut ctx, miners, &mined, event, now),
        }
    }

    let participants: Vec<usize> = participant_indices(&ctx, miners);
    mined.retain(|i, _| participants.contains(i));
    Ok(PlayedRound {
        ctx,
        mined,
        pred_times: inbox.pred_times,
    })
}

/// Agent output waiting for its delivery event.
struct Inbox {
    predictions: BTreeMap<usize, Vec<(MinerId, Vec<Vec<f64>>)>>,
    ballots: BTreeMap<usize, VoteBallot>,
    pred_times: BTreeMap<usize, Tick>,
}

impl Inbox {
    fn deliver(
        &mut self,
        ctx: &mut RoundContext,
        miners: &[MinerProfile],
        mined: &BTreeMap<usize, MineOutput>,
        event: Event,
        now: Tick,
    ) {
        // rejections are logged by the context itself
        match event {
            Event::Mined(i) => {
                let out = &mined[&i];
                let _ = ctx.accept_model_proposal(ModelProposal {
                    miner: miners[i].id,
                    digest: out.digest.clone(),
                    test_records: out.sample.records.clone(),
                    submitted_at: now,
                });
            }
            Event::Predicted(i) => {
                self.pred_times.insert(i, now - ctx.windows().pred_open);
                for (target, probs) in self.predictions.remove(&i).unwrap_or_default() {
                    let _ = ctx.accept_prediction(PredictionSet {
                        predictor: miners[i].id,
                        target,
                        probs,
                        submitted_at: now,
                    });
                }
            }
            Event::Voted(i) => {
                if let Some(ballot) = self.ballots.remove(&i) {
                    let _ = ctx.accept_ballot_at(ballot, now);
                }
            }
            Event::CloseModel | Event::ClosePrediction | Event::CloseVote => {}
        }
    }
}

fn participant_indices(ctx: &RoundContext, miners: &[MinerProfile]) -> Vec<usize> {
    let accepted = ctx.participants();
    miners
        .iter()
        .enumerate()
        .filter(|(_, p)| accepted.contains(&p.id))
        .map(|(i, _)| i)
        .collect()
}
