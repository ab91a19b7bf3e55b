//! Index math and buffer sizing shared by the engines.
//!
//! Everything here is a pure function of the MoE shape: which expert-rank
//! pairs exist, where a pair's sub-region sits in a receive buffer, how big
//! payload slots are, how much memory each layout needs, and how pairs and
//! tokens are split across worker blocks.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::config::{EpConfig, LlLayout};
use crate::error::{EpError, Result};

/// Block-wise placement of `experts` over `ranks`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoeShape {
    pub experts: usize,
    pub ranks: usize,
    pub experts_per_rank: usize,
    pub tokens: usize,
    pub top_k: usize,
    pub hidden: usize,
}

impl MoeShape {
    pub fn new(experts: usize, ranks: usize, tokens: usize, top_k: usize, hidden: usize) -> Result<Self> {
        if ranks == 0 || experts < ranks {
            return Err(EpError::invalid(format!("need experts >= ranks >= 1, got E={experts} N={ranks}")));
        }
        Ok(Self { experts, ranks, experts_per_rank: experts.div_ceil(ranks), tokens, top_k, hidden })
    }

    pub fn from_config(cfg: &EpConfig) -> Self {
        Self {
            experts: cfg.num_experts,
            ranks: cfg.num_ranks,
            experts_per_rank: cfg.experts_per_rank(),
            tokens: cfg.max_tokens_per_rank,
            top_k: cfg.top_k,
            hidden: cfg.hidden,
        }
    }

    /// Rank hosting expert `e` (the data-parallel side's remote peer).
    pub fn rem_dp(&self, e: usize) -> usize {
        e / self.experts_per_rank
    }

    pub fn local_index(&self, e: usize) -> usize {
        e % self.experts_per_rank
    }

    /// Real experts hosted on `rank`; may be shorter than `experts_per_rank`
    /// (or empty) when the last ranks hold padding slots.
    pub fn local_experts(&self, rank: usize) -> Range<usize> {
        let lo = (rank * self.experts_per_rank).min(self.experts);
        let hi = ((rank + 1) * self.experts_per_rank).min(self.experts);
        lo..hi
    }

    /// Sub-regions per rank in the legacy dispatch layout (`L * N`).
    pub fn padded_pairs(&self) -> usize {
        self.experts_per_rank * self.ranks
    }
}

/// Pairs formed by data-parallel rank `r`: one per expert.
pub fn valid_pairs_dp(shape: &MoeShape, r: usize) -> Vec<(usize, usize)> {
    assert!(r < shape.ranks);
    (0..shape.experts).map(|e| (e, r)).collect()
}

/// Pairs formed by the experts hosted on rank `r`: one per (local expert, source rank).
pub fn valid_pairs_expert(shape: &MoeShape, r: usize) -> Vec<(usize, usize)> {
    shape.local_experts(r).flat_map(|e| (0..shape.ranks).map(move |src| (e, src))).collect()
}

/// Legacy dispatch sub-region on the expert side: `(e mod L) * N + r`.
pub fn idx_dp_legacy(e: usize, r: usize, shape: &MoeShape) -> usize {
    shape.local_index(e) * shape.ranks + r
}

/// The literal `(e mod N) * N + r` form; only consistent when `L == N`.
pub fn idx_dp_legacy_strict(e: usize, r: usize, shape: &MoeShape) -> Result<usize> {
    if shape.experts_per_rank != shape.ranks {
        return Err(EpError::invalid(format!(
            "strict legacy index requires L == N (L={}, N={})",
            shape.experts_per_rank, shape.ranks
        )));
    }
    Ok((e % shape.ranks) * shape.ranks + r)
}

/// Legacy combine sub-region on the data-parallel side.
pub fn idx_e(e: usize) -> usize {
    e
}

/// Optimized dispatch sub-region: the source rank.
pub fn idx_d_opt(r: usize) -> usize {
    r
}

/// Optimized combine slot: responses packed by (token, routing position).
pub fn idx_c_opt(t: usize, k: usize, top_k: usize) -> usize {
    t * top_k + k
}

/// Header bytes of a dispatch payload carrying `routing_len` expert ids.
pub fn header_bytes(routing_len: usize) -> usize {
    8 + 4 * routing_len
}

/// Dispatch payload header: source token index plus routing vector.
///
/// Wire format, little-endian: `u32 src_token`, `u32 k_count`, then
/// `k_count` x `u32` expert ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PayloadHeader {
    pub src_token: u32,
    pub routing: Vec<u32>,
}

impl PayloadHeader {
    pub fn encoded_len(&self) -> usize {
        header_bytes(self.routing.len())
    }

    pub fn encode(&self, num_experts: usize) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(num_experts, &mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, num_experts: usize, out: &mut Vec<u8>) -> Result<()> {
        if let Some(&bad) = self.routing.iter().find(|&&e| e as usize >= num_experts) {
            return Err(EpError::invalid(format!("expert id {bad} >= {num_experts}")));
        }
        out.extend_from_slice(&self.src_token.to_le_bytes());
        out.extend_from_slice(&(self.routing.len() as u32).to_le_bytes());
        for e in &self.routing {
            out.extend_from_slice(&e.to_le_bytes());
        }
        Ok(())
    }

    /// Decodes a header from the front of `bytes`.
    pub fn decode(bytes: &[u8], num_experts: usize) -> Result<Self> {
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| EpError::invalid("truncated payload header"))
        };
        let src_token = word(0)?;
        let k = word(1)? as usize;
        let routing = (0..k).map(|i| word(2 + i)).collect::<Result<Vec<_>>>()?;
        if let Some(&bad) = routing.iter().find(|&&e| e as usize >= num_experts) {
            return Err(EpError::invalid(format!("decoded expert id {bad} >= {num_experts}")));
        }
        Ok(Self { src_token, routing })
    }
}

/// Payload slot sizes for one layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotGeometry {
    pub header_bytes: usize,
    pub token_bytes: usize,
    pub scale_bytes: usize,
    /// Combine payloads carry token data only, possibly in another dtype.
    pub combine_token_bytes: usize,
}

impl SlotGeometry {
    pub fn for_config(cfg: &EpConfig, layout: LlLayout) -> Self {
        let header = match layout {
            LlLayout::Legacy => header_bytes(0),
            LlLayout::Optimized => header_bytes(cfg.top_k),
        };
        Self {
            header_bytes: header,
            token_bytes: cfg.hidden * cfg.token_dtype.byte_width(),
            scale_bytes: cfg.scales_per_token() * 4,
            combine_token_bytes: cfg.hidden * cfg.combine_dtype().byte_width(),
        }
    }

    /// Dispatch slot size `P` (header + token + scales).
    pub fn dispatch_slot(&self) -> usize {
        self.header_bytes + self.token_bytes + self.scale_bytes
    }

    pub fn combine_slot(&self) -> usize {
        self.combine_token_bytes
    }
}

/// Receive-region bytes per rank for one buffer parity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Footprint {
    pub dispatch_recv: u64,
    pub combine_recv: u64,
}

impl Footprint {
    pub fn total(&self) -> u64 {
        self.dispatch_recv + self.combine_recv
    }
}

/// Legacy: `E*B*P_d + E*B*P_c` (`2*E*B*P` for equal slots); optimized:
/// `N*B*P_d + B*K*P_c`. Coordination and send regions are not included.
pub fn footprint(shape: &MoeShape, geometry: &SlotGeometry, layout: LlLayout) -> Footprint {
    let (e, n, b, k) = (shape.experts as u64, shape.ranks as u64, shape.tokens as u64, shape.top_k as u64);
    let (pd, pc) = (geometry.dispatch_slot() as u64, geometry.combine_slot() as u64);
    match layout {
        LlLayout::Legacy => Footprint { dispatch_recv: e * b * pd, combine_recv: e * b * pc },
        LlLayout::Optimized => Footprint { dispatch_recv: n * b * pd, combine_recv: b * k * pc },
    }
}

/// Legacy/optimized ratio for equal slot sizes: `2E / (N + K)`.
pub fn memory_reduction_ratio(experts: usize, ranks: usize, top_k: usize) -> f64 {
    2.0 * experts as f64 / (ranks + top_k) as f64
}

/// Tokens routed to each expert from one rank, `m(e, r)`.
pub fn tokens_per_expert(routing: &[u32], num_experts: usize) -> Vec<usize> {
    let mut m = vec![0; num_experts];
    for &e in routing {
        m[e as usize] += 1;
    }
    m
}

/// Checks a flattened `[tokens x top_k]` routing table.
pub fn validate_routing(routing: &[u32], top_k: usize, num_experts: usize) -> Result<()> {
    if top_k == 0 || routing.len() % top_k != 0 {
        return Err(EpError::shape(format!("{} routing entries not a multiple of top_k {top_k}", routing.len())));
    }
    for (t, row) in routing.chunks_exact(top_k).enumerate() {
        let mut seen = BTreeSet::new();
        for &e in row {
            if e as usize >= num_experts {
                return Err(EpError::invalid(format!("token {t} routed to expert {e} >= {num_experts}")));
            }
            if !seen.insert(e) {
                return Err(EpError::invalid(format!("token {t} lists expert {e} twice")));
            }
        }
    }
    Ok(())
}

/// Assignment of (block, lane) workers to work items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerPartition {
    pub blocks: usize,
    pub lanes: usize,
    /// Number of work items covered.
    pub items: usize,
    assignment: Vec<Option<usize>>,
}

impl WorkerPartition {
    pub fn assignment(&self, block: usize, lane: usize) -> Option<usize> {
        self.assignment[block * self.lanes + lane]
    }

    /// Workers serving `item`, in (block, lane) order.
    pub fn workers_of(&self, item: usize) -> Vec<(usize, usize)> {
        (0..self.blocks)
            .flat_map(|i| (0..self.lanes).map(move |j| (i, j)))
            .filter(|&(i, j)| self.assignment(i, j) == Some(item))
            .collect()
    }

    /// Items in the order workers reach them; every item exactly once.
    pub fn item_order(&self) -> Vec<usize> {
        let mut seen = vec![false; self.items];
        let mut order = Vec::with_capacity(self.items);
        for a in self.assignment.iter().flatten() {
            if !seen[*a] {
                seen[*a] = true;
                order.push(*a);
            }
        }
        order
    }

    pub fn unassigned_lanes(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_none()).count()
    }
}

/// Expert-rank pairs over `blocks` x `lanes`: block `i` owns pairs
/// `[i*E_SM, (i+1)*E_SM)` with `G = lanes / E_SM` lanes each.
pub fn assign_pair_workers(blocks: usize, lanes: usize, pairs: usize) -> Result<WorkerPartition> {
    let per_block = if blocks == 0 { 0 } else { pairs / blocks };
    if per_block == 0 {
        return Err(EpError::invalid(format!("{pairs} pairs cannot be spread over {blocks} blocks")));
    }
    let group = lanes / per_block;
    if group == 0 {
        return Err(EpError::invalid(format!("{per_block} pairs per block exceed {lanes} lanes")));
    }
    let mut assignment = vec![None; blocks * lanes];
    for i in 0..blocks {
        for j in 0..lanes {
            if j / group < per_block {
                assignment[i * lanes + j] = Some(i * per_block + j / group);
            }
        }
    }
    Ok(WorkerPartition { blocks, lanes, items: blocks * per_block, assignment })
}

/// Reduction groups of `group_lanes` lanes, `groups_per_block` per block:
/// lane `j` of block `i` joins group `i * groups_per_block + j / group_lanes`.
pub fn assign_reduction_groups(
    blocks: usize,
    lanes: usize,
    group_lanes: usize,
    groups_per_block: usize,
) -> Result<WorkerPartition> {
    if blocks == 0 || group_lanes == 0 || groups_per_block == 0 || groups_per_block * group_lanes > lanes {
        return Err(EpError::invalid(format!(
            "{groups_per_block} groups of {group_lanes} lanes do not fit {lanes} lanes"
        )));
    }
    let mut assignment = vec![None; blocks * lanes];
    for i in 0..blocks {
        for j in 0..groups_per_block * group_lanes {
            assignment[i * lanes + j] = Some(i * groups_per_block + j / group_lanes);
        }
    }
    Ok(WorkerPartition { blocks, lanes, items: blocks * groups_per_block, assignment })
}

/// Visit order over `total` items: partition order first, then any items the
/// partition leaves over.
pub fn schedule(partition: &WorkerPartition, total: usize) -> Vec<usize> {
    let mut order: Vec<usize> = partition.item_order().into_iter().filter(|&i| i < total).collect();
    order.extend(partition.items..total);
    order
}
