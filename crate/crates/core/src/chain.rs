//! In-memory hash-chained ledger: balances, transaction pool, per-round
//! assignments and block commits.

use std::collections::{BTreeMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::{sha256_hex, RewardReport};
use crate::{MinerId, Tick};

/// `prev_hash` of the genesis block.
pub const GENESIS_PREV_HASH: &str =
    "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: String,
    pub from: String,
    pub to: String,
    pub amount: f64,
    pub submitted_at: Tick,
}

impl Transaction {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Transaction("empty transaction id".into()));
        }
        if !(self.amount.is_finite() && self.amount > 0.0) {
            return Err(Error::Transaction(format!(
                "{}: amount must be positive, got {}",
                self.id, self.amount
            )));
        }
        if self.from == self.to {
            return Err(Error::Transaction(format!(
                "{}: sender and recipient are both {}",
                self.id, self.from
            )));
        }
        Ok(())
    }
}

/// Field order here is the field order of the chain dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub prev_hash: String,
    pub round: u64,
    pub winner_ids: Vec<MinerId>,
    pub transactions: Vec<Transaction>,
    pub rewards: RewardReport,
    pub block_hash: String,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

impl Block {
    /// SHA-256 over height, prev hash, transactions, round, winners and
    /// rewards, each length-prefixed and little-endian.
    pub fn compute_hash(&self) -> String {
        let mut buf = Vec::new();
        buf.extend_from_slice(&self.height.to_le_bytes());
        put_str(&mut buf, &self.prev_hash);
        buf.extend_from_slice(&(self.transactions.len() as u64).to_le_bytes());
        for tx in &self.transactions {
            put_str(&mut buf, &tx.id);
            put_str(&mut buf, &tx.from);
            put_str(&mut buf, &tx.to);
            buf.extend_from_slice(&tx.amount.to_le_bytes());
            buf.extend_from_slice(&tx.submitted_at.to_le_bytes());
        }
        buf.extend_from_slice(&self.round.to_le_bytes());
        buf.extend_from_slice(&(self.winner_ids.len() as u64).to_le_bytes());
        for w in &self.winner_ids {
            buf.extend_from_slice(&w.0.to_le_bytes());
        }
        buf.extend_from_slice(&self.rewards.block_reward.to_le_bytes());
        buf.extend_from_slice(&(self.rewards.per_winner.len() as u64).to_le_bytes());
        for w in &self.rewards.per_winner {
            buf.extend_from_slice(&w.miner.0.to_le_bytes());
            buf.extend_from_slice(&w.contribution.to_le_bytes());
            buf.extend_from_slice(&w.reward.to_le_bytes());
        }
        sha256_hex(&buf)
    }
}

/// Where and why chain verification failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainFault {
    pub height: u64,
    pub reason: String,
}

impl std::fmt::Display for ChainFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "block {}: {}", self.height, self.reason)
    }
}

pub fn verify_blocks(blocks: &[Block]) -> Result<(), ChainFault> {
    let mut prev = GENESIS_PREV_HASH.to_string();
    for (i, block) in blocks.iter().enumerate() {
        let fault = |reason: String| ChainFault {
            height: i as u64,
            reason,
        };
        if block.height != i as u64 {
            return Err(fault(format!("height field is {}", block.height)));
        }
        if block.prev_hash != prev {
            return Err(fault("prev_hash does not match predecessor".into()));
        }
        let recomputed = block.compute_hash();
        if block.block_hash != recomputed {
            return Err(fault(format!(
                "block_hash {} does not match recomputed {recomputed}",
                block.block_hash
            )));
        }
        prev = recomputed;
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    blocks: Vec<Block>,
    balances: BTreeMap<String, f64>,
    pool: VecDeque<Transaction>,
    assignments: BTreeMap<MinerId, Vec<Transaction>>,
    seen_ids: HashSet<String>,
}

/// Outcome of one commit, for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitReport {
    pub block: Block,
    pub dropped: Vec<String>,
    pub minted: f64,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_balances(balances: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut ledger = Self::new();
        for (account, amount) in balances {
            if !(amount.is_finite() && amount >= 0.0) {
                return Err(Error::Config(format!(
                    "initial balance of {account} must be non-negative"
                )));
            }
            ledger.balances.insert(account, amount);
        }
        Ok(ledger)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn balances(&self) -> &BTreeMap<String, f64> {
        &self.balances
    }

    pub fn balance(&self, account: &str) -> f64 {
        self.balances.get(account).copied().unwrap_or(0.0)
    }

    pub fn total_balance(&self) -> f64 {
        self.balances.values().sum()
    }

    pub fn pool(&self) -> &VecDeque<Transaction> {
        &self.pool
    }

    pub fn assignments(&self) -> &BTreeMap<MinerId, Vec<Transaction>> {
        &self.assignments
    }

    pub fn tip_hash(&self) -> &str {
        self.blocks
            .last()
            .map(|b| b.block_hash.as_str())
            .unwrap_or(GENESIS_PREV_HASH)
    }

    pub fn submit_transaction(&mut self, tx: Transaction) -> Result<()> {
        tx.validate()?;
        if self.seen_ids.contains(&tx.id) {
            return Err(Error::Transaction(format!("duplicate id {}", tx.id)));
        }
        self.seen_ids.insert(tx.id.clone());
        self.pool.push_back(tx);
        Ok(())
    }

    /// Moves up to `per_miner` transactions off the front of the pool for
    /// each miner, in ascending miner-id order. Any assignments still open
    /// from an earlier round are released first.
    pub fn assign_transactions(
        &mut self,
        miners: &[MinerId],
        per_miner: usize,
    ) -> BTreeMap<MinerId, Vec<String>> {
        self.release_assignments();
        let mut sorted = miners.to_vec();
        sorted.sort();
        sorted.dedup();
        let mut out = BTreeMap::new();
        for miner in sorted {
            let take = per_miner.min(self.pool.len());
            let slice: Vec<Transaction> = self.pool.drain(..take).collect();
            out.insert(miner, slice.iter().map(|t| t.id.clone()).collect());
            self.assignments.insert(miner, slice);
        }
        out
    }

    /// Returns every open assignment to the head of the pool, preserving the
    /// original FIFO order.
    pub fn release_assignments(&mut self) {
        let assigned = std::mem::take(&mut self.assignments);
        let returned: Vec<Transaction> = assigned.into_values().flatten().collect();
        for tx in returned.into_iter().rev() {
            self.pool.push_front(tx);
        }
    }

    /// Applies the winners' assigned transactions (ascending miner id,
    /// underfunded ones dropped), mints rewards and appends the block.
    /// Non-winners' assignments go back to the pool head.
    pub fn commit_block(
        &mut self,
        round: u64,
        winner_ids: &[MinerId],
        rewards: &RewardReport,
    ) -> Result<CommitReport> {
        let mut winners_sorted = winner_ids.to_vec();
        winners_sorted.sort();
        let mut reward_set: Vec<MinerId> = rewards.miners().collect();
        reward_set.sort();
        if winners_sorted != reward_set {
            return Err(Error::Consistency(format!(
                "reward report covers {reward_set:?} but winners are {winners_sorted:?}"
            )));
        }
        if winners_sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Consistency("duplicate winner id".into()));
        }
        if let Some(m) = winners_sorted
            .iter()
            .find(|m| !self.assignments.contains_key(m))
        {
            return Err(Error::Consistency(format!(
                "winner {m} has no assignment this round"
            )));
        }
        if let Some(w) = rewards
            .per_winner
            .iter()
            .find(|w| !(w.reward.is_finite() && w.reward >= 0.0))
        {
            return Err(Error::Consistency(format!(
                "reward for {} is {}",
                w.miner, w.reward
            )));
        }

        let mut applied = Vec::new();
        let mut dropped = Vec::new();
        for miner in &winners_sorted {
            let txs = self.assignments.remove(miner).unwrap_or_default();
            for tx in txs {
                let funds = self.balance(&tx.from);
                if funds >= tx.amount {
                    *self.balances.entry(tx.from.clone()).or_insert(0.0) -= tx.amount;
                    *self.balances.entry(tx.to.clone()).or_insert(0.0) += tx.amount;
                    applied.push(tx);
                } else {
                    dropped.push(tx.id);
                }
            }
        }
        let mut minted = 0.0;
        for w in &rewards.per_winner {
            *self.balances.entry(w.miner.account()).or_insert(0.0) += w.reward;
            minted += w.reward;
        }
        self.release_assignments();

        let mut block = Block {
            height: self.blocks.len() as u64,
            prev_hash: self.tip_hash().to_string(),
            round,
            winner_ids: winner_ids.to_vec(),
            transactions: applied,
            rewards: rewards.clone(),
            block_hash: String::new(),
        };
        block.block_hash = block.compute_hash();
        self.blocks.push(block.clone());
        Ok(CommitReport {
            block,
            dropped,
            minted,
        })
    }

    pub fn verify_chain(&self) -> bool {
        verify_blocks(&self.blocks).is_ok()
    }
}

/// One JSON object per line, one line per block, in height order. Fields
/// appear as `height, prev_hash, round, winner_ids, transactions, rewards,
/// block_hash`; transactions as `id, from, to, amount, submitted_at`.
pub fn dump_chain(blocks: &[Block]) -> String {
    let mut out = String::new();
    for b in blocks {
        out.push_str(&serde_json::to_string(b).expect("blocks serialize"));
        out.push('\n');
    }
    out
}

/// Parses a dump strictly: every line must re-serialize to exactly the same
/// bytes, so any edit either breaks a hash or breaks the canonical form.
pub fn parse_chain_dump(bytes: &[u8]) -> Result<Vec<Block>, ChainFault> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    // A well-formed dump ends with '\n', leaving one empty trailing piece.
    let last = lines.pop().unwrap_or_default();
    if !last.is_empty() {
        return Err(ChainFault {
            height: lines.len() as u64,
            reason: "dump does not end with a newline".into(),
        });
    }
    let mut blocks = Vec::with_capacity(lines.len());
    for (i, line) in lines.into_iter().enumerate() {
        let fault = |reason: String| ChainFault {
            height: i as u64,
            reason,
        };
        let text = std::str::from_utf8(line).map_err(|e| fault(format!("invalid utf-8: {e}")))?;
        let block: Block =
            serde_json::from_str(text).map_err(|e| fault(format!("unparseable: {e}")))?;
        let canonical = serde_json::to_string(&block).expect("blocks serialize");
        if canonical != text {
            return Err(fault("line is not in canonical form".into()));
        }
        blocks.push(block);
    }
    Ok(blocks)
}

/// Parses and verifies a dump; returns the number of blocks.
pub fn verify_chain_dump(bytes: &[u8]) -> Result<usize, ChainFault> {
    let blocks = parse_chain_dump(bytes)?;
    verify_blocks(&blocks)?;
    Ok(blocks.len())
}
