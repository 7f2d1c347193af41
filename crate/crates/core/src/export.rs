//! Run artifacts: `metrics.csv`, `rounds.txt`, `chain.txt`, `summary.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::chain::dump_chain;
use crate::consensus::{RejectionEntry, RoundRecord, VoteBallot};
use crate::fl::{ModelDigest, RewardReport};
use crate::sim::{RoundMetrics, SimConfig, SimOutput, SimStatus};
use crate::{MinerId, Tick};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ROUNDS_FILE: &str = "rounds.txt";
pub const CHAIN_FILE: &str = "chain.txt";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub metrics_csv: String,
    pub rounds_txt: String,
    pub chain_txt: String,
    pub summary_txt: String,
}

#[derive(Serialize)]
struct ProposalLine<'a> {
    miner: MinerId,
    digest: &'a ModelDigest,
    submitted_at: Tick,
}

/// One line of `rounds.txt`. Prediction payloads are summarised by their
/// delivery tick; the full matrices stay in memory only.
#[derive(Serialize)]
struct RoundLine<'a> {
    round: u64,
    global_in: &'a ModelDigest,
    global_out: &'a ModelDigest,
    global_val_loss: Option<f64>,
    global_val_acc: Option<f64>,
    proposals: Vec<ProposalLine<'a>>,
    predictions: Vec<(MinerId, MinerId, Tick)>,
    ballots: &'a [VoteBallot],
    rejections: &'a [RejectionEntry],
    tally: &'a [(MinerId, u64)],
    winners: &'a [MinerId],
    disqualified: &'a [MinerId],
    rewards: &'a RewardReport,
    resampled: &'a [MinerId],
    block_hash: &'a str,
}

fn round_line(rec: &RoundRecord, m: Option<&RoundMetrics>) -> String {
    let line = RoundLine {
        round: rec.round,
        global_in: &rec.global_in,
        global_out: &rec.global_out,
        global_val_loss: m.map(|m| m.global_val_loss),
        global_val_acc: m.map(|m| m.global_val_acc),
        proposals: rec
            .proposals
            .iter()
            .map(|p| ProposalLine {
                miner: p.miner,
                digest: &p.digest,
                submitted_at: p.submitted_at,
            })
            .collect(),
        predictions: rec
            .predictions
            .iter()
            .map(|p| (p.predictor, p.target, p.submitted_at))
            .collect(),
        ballots: &rec.ballots,
        rejections: &rec.rejections,
        tally: &rec.tally,
        winners: &rec.winners,
        disqualified: &rec.disqualified,
        rewards: &rec.rewards,
        resampled: m.map_or(&[], |m| m.resampled.as_slice()),
        block_hash: &rec.block_hash,
    };
    serde_json::to_string(&line).expect("round line serialises")
}

pub fn render(label: &str, config: &SimConfig, out: &SimOutput) -> Artifacts {
    let mut rounds_txt = String::new();
    for rec in &out.records {
        let m = out.metrics.rounds.iter().find(|m| m.round == rec.round);
        rounds_txt.push_str(&round_line(rec, m));
        rounds_txt.push('\n');
    }
    Artifacts {
        metrics_csv: out.metrics.to_csv_string(),
        rounds_txt,
        chain_txt: dump_chain(out.ledger.blocks()),
        summary_txt: summary(label, config, out),
    }
}

pub fn adversary_ids(config: &SimConfig) -> Vec<MinerId> {
    config
        .miners
        .iter()
        .filter(|m| m.behavior.is_adversary())
        .map(|m| m.id)
        .collect()
}

fn summary(label: &str, config: &SimConfig, out: &SimOutput) -> String {
    let mut s = String::new();
    let completed = out.records.len();
    let _ = writeln!(s, "scenario: {label}");
    let _ = writeln!(s, "seed: {}", config.seed);
    match &out.status {
        SimStatus::Completed => {
            let _ = writeln!(s, "status: completed");
        }
        SimStatus::Aborted { round, reason } => {
            let _ = writeln!(s, "status: aborted in round {round}: {reason}");
        }
    }
    let _ = writeln!(s, "rounds_completed: {completed} of {}", config.rounds);
    let rc = &config.round_config;
    let _ = writeln!(
        s,
        "deadlines: model {} pred {} vote {}",
        rc.model_deadline, rc.pred_deadline, rc.vote_deadline
    );
    let _ = writeln!(s, "blocks: {}", out.ledger.blocks().len());
    let _ = writeln!(s, "final_block_hash: {}", out.ledger.tip_hash());
    let _ = writeln!(s, "initial_global_val_loss: {}", out.initial_val_loss);
    if let Some(last) = out.metrics.rounds.last() {
        let _ = writeln!(s, "final_global_val_loss: {}", last.global_val_loss);
        let _ = writeln!(s, "final_global_val_acc: {}", last.global_val_acc);
    }
    let adversaries = adversary_ids(config);
    let names: Vec<String> = adversaries.iter().map(|m| m.to_string()).collect();
    let _ = writeln!(
        s,
        "adversaries: {}",
        if names.is_empty() { "none".to_string() } else { names.join(" ") }
    );
    let adversary_wins: usize = adversaries.iter().map(|&m| out.metrics.wins(m)).sum();
    let _ = writeln!(s, "adversary_wins: {adversary_wins}");
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<6} {:>5} {:>14} {:>8}", "miner", "wins", "reward", "records");
    for m in &config.miners {
        let _ = writeln!(
            s,
            "{:<6} {:>5} {:>14.6} {:>8}",
            m.id.to_string(),
            out.metrics.wins(m.id),
            out.metrics.total_reward(m.id),
            m.train_data.len() + m.holdout.len()
        );
    }
    s
}

/// Writes all four files, creating `dir` if needed.
pub fn write_artifacts(dir: &Path, artifacts: &Artifacts) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(METRICS_FILE), &artifacts.metrics_csv)?;
    fs::write(dir.join(ROUNDS_FILE), &artifacts.rounds_txt)?;
    fs::write(dir.join(CHAIN_FILE), &artifacts.chain_txt)?;
    fs::write(dir.join(SUMMARY_FILE), &artifacts.summary_txt)?;
    Ok(())
}
