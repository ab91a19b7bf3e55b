//! Per-operation statistics records.

use serde::{Deserialize, Serialize};

use crate::config::Algorithm;
use crate::fabric::TrafficCounters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpName {
    Dispatch,
    Combine,
}

impl std::fmt::Display for OpName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OpName::Dispatch => "dispatch",
            OpName::Combine => "combine",
        })
    }
}

/// Traffic and buffer usage of one dispatch or combine on one rank.
///
/// `bytes_put` and `msgs` count both network puts and direct stores;
/// `slots_used` counts payload slots consumed on the receiving side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpStats {
    pub op: OpName,
    pub algorithm: Algorithm,
    pub rank: usize,
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

impl OpStats {
    pub fn new(op: OpName, algorithm: Algorithm, rank: usize) -> Self {
        Self {
            op,
            algorithm,
            rank,
            bytes_put: 0,
            msgs: 0,
            signals: 0,
            slots_used: 0,
            buffer_bytes: 0,
            inter_node_msgs: 0,
            intra_node_msgs: 0,
            fifo_stalls: 0,
            copy_bytes: 0,
        }
    }

    pub fn add_traffic(&mut self, t: &TrafficCounters) {
        self.bytes_put += t.put_bytes + t.lsa_store_bytes;
        self.msgs += t.puts + t.lsa_stores;
        self.signals += t.signal_adds + t.lsa_signals;
    }
}
