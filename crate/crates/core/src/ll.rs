//! Low-latency engine: full-mesh dispatch and combine with per-pair
//! counters, double-buffered receive regions and staged execution.
//!
//! Every send phase ends with one counter flush per expert-rank pair. A
//! dispatch flush carries `m + 1` (so empty pairs still signal), a combine
//! flush carries 1. Receivers zero a parity's counters once they have
//! consumed everything it holds.

use crate::config::{EpConfig, LlLayout};
use crate::error::{EpError, Result};
use crate::fabric::{Endpoint, SignalBarrier, SignalRange, Window};
use crate::layout::{
    assign_pair_workers, assign_reduction_groups, idx_c_opt, idx_d_opt, idx_dp_legacy, idx_e, schedule,
    tokens_per_expert, valid_pairs_expert, MoeShape, PayloadHeader, SlotGeometry,
};
use crate::mem::GroupMemory;
use crate::stats::OpName;
use crate::tensor::{Dtype, NDTensor};

/// Lanes per worker block.
pub const LANES: usize = 32;
/// Lanes per combine reduction group.
pub const REDUCTION_LANES: usize = 8;
/// Reduction groups per worker block.
pub const GROUPS_PER_BLOCK: usize = 2;

/// Per-rank buffer sizes; one copy of each region per parity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LlBufferPlan {
    pub layout: LlLayout,
    pub dispatch_slot: usize,
    pub combine_slot: usize,
    pub send: usize,
    pub dispatch_recv: usize,
    pub combine_recv: usize,
    pub dispatch_signals: usize,
    pub combine_signals: usize,
}

impl LlBufferPlan {
    pub fn new(cfg: &EpConfig) -> Self {
        let shape = MoeShape::from_config(cfg);
        let geom = SlotGeometry::for_config(cfg, cfg.ll_layout);
        let (b, pd, pc) = (cfg.max_tokens_per_rank, geom.dispatch_slot(), geom.combine_slot());
        let (dispatch_recv, combine_recv) = match cfg.ll_layout {
            LlLayout::Legacy => (shape.padded_pairs() * b * pd, cfg.num_experts * b * pc),
            LlLayout::Optimized => (cfg.num_ranks * b * pd, b * cfg.top_k * pc),
        };
        Self {
            layout: cfg.ll_layout,
            dispatch_slot: pd,
            combine_slot: pc,
            send: b * pd,
            dispatch_recv,
            combine_recv,
            dispatch_signals: shape.padded_pairs(),
            combine_signals: cfg.num_experts,
        }
    }

    /// Dispatch plus combine receive bytes of one parity.
    pub fn receive_bytes(&self) -> usize {
        self.dispatch_recv + self.combine_recv
    }

    /// Counter bytes of one parity, 8 per counter.
    pub fn coordination_bytes(&self) -> usize {
        8 * (self.dispatch_signals + self.combine_signals)
    }

    /// Registered window bytes for both parities.
    pub fn window_bytes(&self) -> usize {
        2 * (self.send + self.dispatch_recv + self.combine_recv)
    }
}

#[derive(Debug, Clone, Copy)]
struct ParityBuffers {
    send: Window,
    dispatch_recv: Window,
    combine_recv: Window,
    dispatch_signals: SignalRange,
    combine_signals: SignalRange,
}

/// One received token: where it came from and where it was placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheEntry {
    pub expert: usize,
    pub src_rank: usize,
    pub src_token: usize,
    /// Routing position of `expert` in the source token's top-k; the legacy
    /// header does not carry it.
    pub k: Option<usize>,
    /// Row inside the expert's block of the 3D output.
    pub row: usize,
}

/// A counter increment issued by a send phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlushRecord {
    pub op: OpName,
    pub seq: u64,
    pub expert: usize,
    pub dp_rank: usize,
    pub target_rank: usize,
    pub signal_id: usize,
    pub value: u64,
}

#[derive(Debug, Clone)]
pub struct LlDispatchOutputs {
    /// `[L, N*B, H]` in the token dtype.
    pub tokens: NDTensor,
    /// `[L, N*B, H/128]` F32 when tokens are FP8.
    pub scales: Option<NDTensor>,
    /// `[L]` integer tensors receiving per-expert token counts.
    pub counters: Vec<NDTensor>,
}

#[derive(Debug, Clone)]
pub struct LlCombineRecv {
    pub weights: NDTensor,
    pub tokens_out: NDTensor,
}

/// Engine-side state of one handle.
#[derive(Debug, Default)]
pub struct LlHandle {
    pub seq: u64,
    pub parity: Option<usize>,
    pub cache: Vec<CacheEntry>,
    pub recv_counts: Vec<usize>,
    pub pending_dispatch: Option<LlDispatchOutputs>,
    pub pending_combine: Option<LlCombineRecv>,
}

#[derive(Debug)]
pub struct LlEngine {
    cfg: EpConfig,
    shape: MoeShape,
    geom: SlotGeometry,
    plan: LlBufferPlan,
    parities: [ParityBuffers; 2],
    pair_order: Vec<usize>,
    seq: u64,
    owner: [Option<u64>; 2],
    barrier_needed: [bool; 2],
    barrier: SignalBarrier,
    flush_log: Vec<FlushRecord>,
    /// Fault injection for mutation tests: shifts every optimized combine slot by one.
    pub debug_combine_slot_shift: bool,
}

fn store(ep: &Endpoint, dst: usize, window: &Window, offset: usize, bytes: &[u8]) -> Result<()> {
    if ep.lsa_accessible(dst) {
        ep.lsa_store(dst, window.window_id, offset, bytes)
    } else {
        ep.put(dst, window.window_id, offset, bytes)
    }
}

fn flush(ep: &Endpoint, dst: usize, signal_id: usize, value: u64) -> Result<()> {
    if ep.lsa_accessible(dst) {
        ep.lsa_signal_add(dst, signal_id, value)
    } else {
        ep.signal_add(dst, signal_id, value)
    }
}

/// Pair visit order from the worker partition of `experts` pairs.
fn pair_order(experts: usize) -> Result<Vec<usize>> {
    let blocks = experts.div_ceil(LANES);
    Ok(schedule(&assign_pair_workers(blocks, LANES, experts)?, experts))
}

/// Token visit order of the combine reduction: group-major, tokens dealt
/// round-robin over the reduction groups.
fn reduction_order(tokens: usize) -> Result<Vec<usize>> {
    if tokens == 0 {
        return Ok(Vec::new());
    }
    let blocks = tokens.div_ceil(GROUPS_PER_BLOCK).min(LANES);
    let part = assign_reduction_groups(blocks, LANES, REDUCTION_LANES, GROUPS_PER_BLOCK)?;
    let groups = part.items;
    Ok(part.item_order().into_iter().flat_map(|g| (g..tokens).step_by(groups)).collect())
}

impl LlEngine {
    pub fn new(ep: &Endpoint, cfg: &EpConfig, mem: &mut GroupMemory) -> Result<Self> {
        let plan = LlBufferPlan::new(cfg);
        let mut alloc = |p: usize| -> Result<ParityBuffers> {
            Ok(ParityBuffers {
                send: mem.register(ep, &format!("ll.p{p}.send"), plan.send)?,
                dispatch_recv: mem.register(ep, &format!("ll.p{p}.dispatch_recv"), plan.dispatch_recv)?,
                combine_recv: mem.register(ep, &format!("ll.p{p}.combine_recv"), plan.combine_recv)?,
                dispatch_signals: ep.register_signals(plan.dispatch_signals),
                combine_signals: ep.register_signals(plan.combine_signals),
            })
        };
        let parities = [alloc(0)?, alloc(1)?];
        Ok(Self {
            cfg: cfg.clone(),
            shape: MoeShape::from_config(cfg),
            geom: SlotGeometry::for_config(cfg, cfg.ll_layout),
            plan,
            parities,
            pair_order: pair_order(cfg.num_experts)?,
            seq: 0,
            owner: [None; 2],
            barrier_needed: [false; 2],
            barrier: SignalBarrier::new(ep),
            flush_log: Vec::new(),
            debug_combine_slot_shift: false,
        })
    }

    pub fn plan(&self) -> &LlBufferPlan {
        &self.plan
    }

    pub fn flush_log(&self) -> &[FlushRecord] {
        &self.flush_log
    }

    pub fn take_flush_log(&mut self) -> Vec<FlushRecord> {
        std::mem::take(&mut self.flush_log)
    }

    /// Window ids in registration order, for cross-rank consistency checks.
    pub fn window_ids(&self) -> Vec<u32> {
        self.parities
            .iter()
            .flat_map(|p| [p.send.window_id, p.dispatch_recv.window_id, p.combine_recv.window_id])
            .collect()
    }

    fn pack(&self, t: usize, routing: &[u32], tokens: &NDTensor, scales: Option<&NDTensor>) -> Result<Vec<u8>> {
        let header = PayloadHeader {
            src_token: t as u32,
            routing: match self.cfg.ll_layout {
                LlLayout::Legacy => Vec::new(),
                LlLayout::Optimized => routing.to_vec(),
            },
        };
        let mut out = Vec::with_capacity(self.geom.dispatch_slot());
        header.encode_into(self.cfg.num_experts, &mut out)?;
        out.extend_from_slice(&tokens.read_row_bytes(t));
        if let Some(s) = scales {
            for v in s.read_row_f32(t) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        debug_assert_eq!(out.len(), self.geom.dispatch_slot());
        Ok(out)
    }

    fn unpack(&self, slot: &[u8], out: &LlDispatchOutputs, row: usize) {
        let hb = self.geom.header_bytes;
        let tb = self.geom.token_bytes;
        out.tokens.write_row_bytes(row, &slot[hb..hb + tb]);
        if let Some(s) = &out.scales {
            let vals: Vec<f32> = slot[hb + tb..hb + tb + self.geom.scale_bytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            s.write_row_f32(row, &vals);
        }
    }

    /// Count, send and flush. Claims the next parity for `handle_id`.
    pub async fn dispatch_send(
        &mut self,
        ep: &Endpoint,
        h: &mut LlHandle,
        handle_id: u64,
        routing: &[u32],
        tokens: &NDTensor,
        scales: Option<&NDTensor>,
    ) -> Result<()> {
        let p = (self.seq % 2) as usize;
        if let Some(owner) = self.owner[p] {
            return Err(EpError::state(format!(
                "LL buffer parity {p} still held by handle {owner}; finish its combine first"
            )));
        }
        if self.barrier_needed[p] {
            self.barrier.arrive(ep).await?;
            self.barrier_needed[p] = false;
        }
        self.owner[p] = Some(handle_id);
        h.parity = Some(p);
        h.seq = self.seq;
        self.seq += 1;

        let bufs = self.parities[p];
        let (r, k, b) = (ep.rank(), self.cfg.top_k, self.cfg.max_tokens_per_rank);
        let pd = self.geom.dispatch_slot();
        let n_tok = routing.len() / k;
        let m = tokens_per_expert(routing, self.cfg.num_experts);

        let mut payloads = Vec::with_capacity(n_tok);
        for t in 0..n_tok {
            let payload = self.pack(t, &routing[t * k..(t + 1) * k], tokens, scales)?;
            ep.write_local(&bufs.send, t * pd, &payload)?;
            payloads.push(payload);
        }

        match self.cfg.ll_layout {
            LlLayout::Legacy => {
                let mut next = vec![0usize; self.cfg.num_experts];
                for (t, row) in routing.chunks_exact(k).enumerate() {
                    for &e in row {
                        let e = e as usize;
                        let idx = idx_dp_legacy(e, r, &self.shape);
                        let offset = (idx * b + next[e]) * pd;
                        next[e] += 1;
                        store(ep, self.shape.rem_dp(e), &bufs.dispatch_recv, offset, &payloads[t])?;
                    }
                }
            }
            LlLayout::Optimized => {
                let mut next = vec![0usize; self.cfg.num_ranks];
                for (t, row) in routing.chunks_exact(k).enumerate() {
                    let mut dsts: Vec<usize> = row.iter().map(|&e| self.shape.rem_dp(e as usize)).collect();
                    dsts.sort_unstable();
                    dsts.dedup();
                    for dst in dsts {
                        let offset = (idx_d_opt(r) * b + next[dst]) * pd;
                        next[dst] += 1;
                        store(ep, dst, &bufs.dispatch_recv, offset, &payloads[t])?;
                    }
                }
            }
        }

        for &e in &self.pair_order {
            let dst = self.shape.rem_dp(e);
            let signal_id = bufs.dispatch_signals.id(idx_dp_legacy(e, r, &self.shape));
            let value = m[e] as u64 + 1;
            flush(ep, dst, signal_id, value)?;
            self.flush_log.push(FlushRecord {
                op: OpName::Dispatch,
                seq: h.seq,
                expert: e,
                dp_rank: r,
                target_rank: dst,
                signal_id,
                value,
            });
        }
        Ok(())
    }

    /// Waits for every local pair, places tokens expert-major and fills the
    /// handle cache. Returns the number of receive slots consumed.
    pub async fn dispatch_recv(&mut self, ep: &Endpoint, h: &mut LlHandle, out: &LlDispatchOutputs) -> Result<u64> {
        let p = h.parity.ok_or_else(|| EpError::state("no dispatch in flight on this handle"))?;
        let bufs = self.parities[p];
        let q = ep.rank();
        let (n, b, l) = (self.cfg.num_ranks, self.cfg.max_tokens_per_rank, self.shape.experts_per_rank);
        let cap = self.cfg.ll_expert_capacity();
        let pd = self.geom.dispatch_slot();
        let local = self.shape.local_experts(q);

        let mut m = vec![vec![0usize; n]; l];
        for e in local.clone() {
            let el = self.shape.local_index(e);
            for (r, slot) in m[el].iter_mut().enumerate() {
                let id = bufs.dispatch_signals.id(idx_dp_legacy(e, r, &self.shape));
                ep.wait_signal(id, 1).await?;
                let count = (ep.read_signal(id) - 1) as usize;
                if count > b {
                    return Err(EpError::capacity(format!("pair ({e}, {r}) announced {count} > {b} tokens")));
                }
                *slot = count;
            }
        }

        let mut base = vec![vec![0usize; n]; l];
        let mut counts = vec![0usize; l];
        for el in 0..l {
            let mut acc = 0;
            for r in 0..n {
                base[el][r] = acc;
                acc += m[el][r];
            }
            if acc > cap {
                return Err(EpError::capacity(format!("local expert {el} receives {acc} > {cap} tokens")));
            }
            counts[el] = acc;
        }

        h.cache.clear();
        let mut slots = 0u64;
        match self.cfg.ll_layout {
            LlLayout::Legacy => {
                for e in local.clone() {
                    let el = self.shape.local_index(e);
                    for r in 0..n {
                        let idx = idx_dp_legacy(e, r, &self.shape);
                        for a in 0..m[el][r] {
                            let bytes = ep.read_local(&bufs.dispatch_recv, (idx * b + a) * pd, pd)?;
                            let header = PayloadHeader::decode(&bytes, self.cfg.num_experts)?;
                            let row = base[el][r] + a;
                            self.unpack(&bytes, out, el * cap + row);
                            h.cache.push(CacheEntry {
                                expert: e,
                                src_rank: r,
                                src_token: header.src_token as usize,
                                k: None,
                                row,
                            });
                            slots += 1;
                        }
                    }
                }
            }
            LlLayout::Optimized => {
                for r in 0..n {
                    let need: Vec<usize> = (0..l).map(|el| m[el][r]).collect();
                    let mut seen = vec![0usize; l];
                    let mut a = 0;
                    while seen != need {
                        if a >= b {
                            return Err(EpError::capacity(format!(
                                "sub-region of rank {r} exhausted before all announced tokens arrived"
                            )));
                        }
                        let bytes = ep.read_local(&bufs.dispatch_recv, (idx_d_opt(r) * b + a) * pd, pd)?;
                        let header = PayloadHeader::decode(&bytes, self.cfg.num_experts)?;
                        for (kk, &e) in header.routing.iter().enumerate() {
                            let e = e as usize;
                            if !local.contains(&e) {
                                continue;
                            }
                            let el = self.shape.local_index(e);
                            if seen[el] >= need[el] {
                                return Err(EpError::capacity(format!("expert {e} got more tokens than announced")));
                            }
                            let row = base[el][r] + seen[el];
                            seen[el] += 1;
                            self.unpack(&bytes, out, el * cap + row);
                            h.cache.push(CacheEntry {
                                expert: e,
                                src_rank: r,
                                src_token: header.src_token as usize,
                                k: Some(kk),
                                row,
                            });
                        }
                        a += 1;
                        slots += 1;
                    }
                }
            }
        }
        ep.reset_signals(bufs.dispatch_signals);

        let as_i64: Vec<i64> = counts.iter().map(|&c| c as i64).collect();
        for c in &out.counters {
            c.write_i64(&as_i64)?;
        }
        h.recv_counts = counts;
        Ok(slots)
    }

    /// Returns each cached token's expert output row to its source rank.
    pub fn combine_send(&mut self, ep: &Endpoint, h: &LlHandle, expert_out: &NDTensor) -> Result<()> {
        let p = h.parity.ok_or_else(|| EpError::state("handle holds no dispatched tokens"))?;
        let bufs = self.parities[p];
        let (b, k) = (self.cfg.max_tokens_per_rank, self.cfg.top_k);
        let cap = self.cfg.ll_expert_capacity();
        let pc = self.geom.combine_slot();
        for c in &h.cache {
            let el = self.shape.local_index(c.expert);
            let bytes = expert_out.read_row_bytes(el * cap + c.row);
            let slot = match self.cfg.ll_layout {
                LlLayout::Legacy => idx_e(c.expert) * b + c.src_token,
                LlLayout::Optimized => {
                    let kk = c.k.expect("optimized cache entries carry k");
                    let s = idx_c_opt(c.src_token, kk, k);
                    if self.debug_combine_slot_shift {
                        (s + 1) % (b * k)
                    } else {
                        s
                    }
                }
            };
            store(ep, c.src_rank, &bufs.combine_recv, slot * pc, &bytes)?;
        }
        for (e, r) in valid_pairs_expert(&self.shape, ep.rank()) {
            let signal_id = bufs.combine_signals.id(idx_e(e));
            flush(ep, r, signal_id, 1)?;
            self.flush_log.push(FlushRecord {
                op: OpName::Combine,
                seq: h.seq,
                expert: e,
                dp_rank: r,
                target_rank: r,
                signal_id,
                value: 1,
            });
        }
        Ok(())
    }

    /// Weighted reduction of the returned rows, then counter reset and
    /// release of the parity. Returns the number of slots read.
    pub async fn combine_recv(
        &mut self,
        ep: &Endpoint,
        h: &mut LlHandle,
        handle_id: u64,
        routing: &[u32],
        recv: &LlCombineRecv,
    ) -> Result<u64> {
        let p = h.parity.ok_or_else(|| EpError::state("handle holds no dispatched tokens"))?;
        let bufs = self.parities[p];
        let (b, k, hidden) = (self.cfg.max_tokens_per_rank, self.cfg.top_k, self.cfg.hidden);
        let pc = self.geom.combine_slot();
        let cd: Dtype = self.cfg.combine_dtype();
        let cw = cd.byte_width();
        let n_tok = routing.len() / k;
        let mut slots = 0u64;
        for t in reduction_order(n_tok)? {
            let w = recv.weights.read_row_f32(t);
            let mut acc = vec![0f32; hidden];
            for kk in 0..k {
                let e = routing[t * k + kk] as usize;
                ep.wait_signal(bufs.combine_signals.id(idx_e(e)), 1).await?;
                let slot = match self.cfg.ll_layout {
                    LlLayout::Legacy => idx_e(e) * b + t,
                    LlLayout::Optimized => idx_c_opt(t, kk, k),
                };
                ep.with_local(&bufs.combine_recv, slot * pc, pc, |bytes| {
                    for (a, c) in acc.iter_mut().zip(bytes.chunks_exact(cw)) {
                        *a += w[kk] * cd.decode_f32(c);
                    }
                })?;
                slots += 1;
            }
            recv.tokens_out.write_row_f32(t, &acc);
        }
        for e in 0..self.cfg.num_experts {
            ep.wait_signal(bufs.combine_signals.id(idx_e(e)), 1).await?;
        }
        ep.reset_signals(bufs.combine_signals);
        if self.owner[p] == Some(handle_id) {
            self.owner[p] = None;
        }
        Ok(slots)
    }

    /// Drops `handle_id`'s claim on its parity without a combine; the next
    /// dispatch on that parity synchronizes all ranks first.
    pub fn release_handle(&mut self, handle_id: u64, h: &LlHandle) {
        if let Some(p) = h.parity {
            if self.owner[p] == Some(handle_id) {
                self.owner[p] = None;
                self.barrier_needed[p] = true;
            }
        }
    }
}
