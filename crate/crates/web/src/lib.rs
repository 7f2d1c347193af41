//! Browser bindings. Each export takes plain numbers/strings and returns a
//! JSON string the page renders.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use fedchain_core::fl::distribute_rewards;
use fedchain_core::scenario::Preset;
use fedchain_core::sim::{run_simulation, CostModel, SimStatus};
use fedchain_core::MinerId;

#[derive(Serialize)]
struct MinerSummary {
    id: u32,
    adversary: bool,
    records: usize,
    wins: usize,
    reward: f64,
}

#[derive(Serialize)]
struct SimulationView {
    preset: String,
    seed: u64,
    status: String,
    initial_val_loss: f64,
    val_loss: Vec<f64>,
    val_acc: Vec<f64>,
    winners: Vec<Vec<u32>>,
    miners: Vec<MinerSummary>,
    adversary_wins: usize,
    tip: String,
}

pub fn simulate_json(preset: &str, seed: u64, rounds: u32) -> Result<String, String> {
    let mut scenario = Preset::from_name(preset).map_err(|e| e.to_string())?.scenario();
    if !(1..=200).contains(&rounds) {
        return Err("rounds must be between 1 and 200".into());
    }
    scenario.seed = seed;
    scenario.rounds = rounds as u64;
    let config = scenario.build().map_err(|e| e.to_string())?;
    let out = run_simulation(&config).map_err(|e| e.to_string())?;
    let miners: Vec<MinerSummary> = config
        .miners
        .iter()
        .map(|m| MinerSummary {
            id: m.id.0,
            adversary: m.behavior.is_adversary(),
            records: m.train_data.len() + m.holdout.len(),
            wins: out.metrics.wins(m.id),
            reward: out.metrics.total_reward(m.id),
        })
        .collect();
    let view = SimulationView {
        preset: preset.to_string(),
        seed,
        status: match &out.status {
            SimStatus::Completed => "completed".into(),
            SimStatus::Aborted { round, reason } => format!("aborted in round {round}: {reason}"),
        },
        initial_val_loss: out.initial_val_loss,
        val_loss: out.metrics.rounds.iter().map(|r| r.global_val_loss).collect(),
        val_acc: out.metrics.rounds.iter().map(|r| r.global_val_acc).collect(),
        winners: out
            .metrics
            .rounds
            .iter()
            .map(|r| r.winners.iter().map(|m| m.0).collect())
            .collect(),
        adversary_wins: miners.iter().filter(|m| m.adversary).map(|m| m.wins).sum(),
        miners,
        tip: out.ledger.tip_hash().to_string(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct CostCurves {
    n_train: Vec<usize>,
    forward: Vec<f64>,
    knn: Vec<f64>,
}

/// Noise-free forward and k-NN costs for `n_test` queries of dimension
/// `dim`, as the k-NN training set grows from 1 to `max_train`.
pub fn cost_curves_json(h_max: usize, n_test: usize, dim: usize, max_train: usize) -> Result<String, String> {
    let cost = CostModel::new(1.0, h_max, 0.0).map_err(|e| e.to_string())?;
    if n_test == 0 || dim == 0 || max_train == 0 || max_train > 100_000 {
        return Err("n_test, dim and max_train must be positive (max_train <= 100000)".into());
    }
    let step = (max_train / 200).max(1);
    let n_train: Vec<usize> = (1..=max_train).step_by(step).collect();
    let curves = CostCurves {
        forward: n_train.iter().map(|_| cost.forward_work(n_test, dim)).collect(),
        knn: n_train.iter().map(|&n| cost.knn_work(n, n_test, dim)).collect(),
        n_train,
    };
    serde_json::to_string(&curves).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Share {
    miner: u32,
    contribution: f64,
    reward: f64,
}

/// `contributions` is a comma- or whitespace-separated list; miner ids are
/// assigned 1, 2, ... in order.
pub fn reward_split_json(contributions: &str, block_reward: f64) -> Result<String, String> {
    let values: Vec<f64> = contributions
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s}")))
        .collect::<Result<_, _>>()?;
    let pairs: Vec<(MinerId, f64)> = values
        .iter()
        .enumerate()
        .map(|(i, &c)| (MinerId(i as u32 + 1), c))
        .collect();
    let report = distribute_rewards(&pairs, block_reward).map_err(|e| e.to_string())?;
    let shares: Vec<Share> = report
        .per_winner
        .iter()
        .map(|w| Share {
            miner: w.miner.0,
            contribution: w.contribution,
            reward: w.reward,
        })
        .collect();
    serde_json::to_string(&shares).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn simulate(preset: &str, seed: u32, rounds: u32) -> Result<String, JsError> {
    simulate_json(preset, seed as u64, rounds).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn cost_curves(h_max: u32, n_test: u32, dim: u32, max_train: u32) -> Result<String, JsError> {
    cost_curves_json(h_max as usize, n_test as usize, dim as usize, max_train as usize)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn reward_split(contributions: &str, block_reward: f64) -> Result<String, JsError> {
    reward_split_json(contributions, block_reward).map_err(|e| JsError::new(&e))
}
