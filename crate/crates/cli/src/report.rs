//! Stats CSV: one row per (iteration, operation, rank) plus a summary row.

use std::io::Write;

use ep_core::stats::OpStats;
use serde::{Deserialize, Serialize};

pub const SUMMARY_OP: &str = "summary";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub iter: u64,
    pub op: String,
    pub algorithm: String,
    /// -1 on the summary row.
    pub rank: i64,
    pub bytes_put: u64,
    pub msgs: u64,
    pub signals: u64,
    pub slots_used: u64,
    pub buffer_bytes: u64,
    pub inter_node_msgs: u64,
    pub intra_node_msgs: u64,
    pub fifo_stalls: u64,
    pub copy_bytes: u64,
}

impl StatsRow {
    pub fn from_stats(iter: u64, s: &OpStats) -> Self {
        Self {
            iter,
            op: s.op.to_string(),
            algorithm: format!("{:?}", s.algorithm).to_lowercase(),
            rank: s.rank as i64,
            bytes_put: s.bytes_put,
            msgs: s.msgs,
            signals: s.signals,
            slots_used: s.slots_used,
            buffer_bytes: s.buffer_bytes,
            inter_node_msgs: s.inter_node_msgs,
            intra_node_msgs: s.intra_node_msgs,
            fifo_stalls: s.fifo_stalls,
            copy_bytes: s.copy_bytes,
        }
    }

    /// Column sums over `rows`; `buffer_bytes` sums each rank's largest value.
    pub fn summary(iters: u64, rows: &[StatsRow]) -> Self {
        let mut per_rank = std::collections::BTreeMap::new();
        for r in rows {
            let b = per_rank.entry(r.rank).or_insert(0u64);
            *b = (*b).max(r.buffer_bytes);
        }
        let sum = |f: fn(&StatsRow) -> u64| rows.iter().map(f).sum();
        Self {
            iter: iters,
            op: SUMMARY_OP.into(),
            algorithm: rows.first().map(|r| r.algorithm.clone()).unwrap_or_default(),
            rank: -1,
            bytes_put: sum(|r| r.bytes_put),
            msgs: sum(|r| r.msgs),
            signals: sum(|r| r.signals),
            slots_used: sum(|r| r.slots_used),
            buffer_bytes: per_rank.values().sum(),
            inter_node_msgs: sum(|r| r.inter_node_msgs),
            intra_node_msgs: sum(|r| r.intra_node_msgs),
            fifo_stalls: sum(|r| r.fifo_stalls),
            copy_bytes: sum(|r| r.copy_bytes),
        }
    }
}

pub fn write_csv(rows: &[StatsRow], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(input: impl std::io::Read) -> csv::Result<Vec<StatsRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
