use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{MinerId, Tick};

pub const CSV_HEADER: [&str; 8] = [
    "round", "miner", "val_loss", "val_acc", "won", "points", "reward", "pred_time",
];

/// One miner in one round. `pred_time` counts ticks from the opening of the
/// prediction phase and is kept even when the submission was late.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u64,
    pub miner: MinerId,
    pub val_loss: f64,
    pub val_acc: f64,
    pub won: bool,
    pub points: u64,
    pub reward: f64,
    pub pred_time: Option<Tick>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub winners: Vec<MinerId>,
    pub block_hash: String,
    pub global_val_loss: f64,
    pub global_val_acc: f64,
    /// Miners whose held-out slice was too small, so test records were
    /// drawn with replacement.
    pub resampled: Vec<MinerId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub rounds: Vec<RoundMetrics>,
}

impl MetricsLog {
    pub fn rows_for(&self, round: u64) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.round == round)
    }

    pub fn miner_rows(&self, miner: MinerId) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.miner == miner)
    }

    pub fn wins(&self, miner: MinerId) -> usize {
        self.miner_rows(miner).filter(|r| r.won).count()
    }

    pub fn total_reward(&self, miner: MinerId) -> f64 {
        self.miner_rows(miner).map(|r| r.reward).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                r.miner.0.to_string(),
                r.val_loss.to_string(),
                r.val_acc.to_string(),
                u8::from(r.won).to_string(),
                r.points.to_string(),
                r.reward.to_string(),
                r.pred_time.map(|t| t.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}
