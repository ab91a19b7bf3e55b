//! High-throughput engine: hierarchical dispatch and combine.
//!
//! Same-node targets are written directly with load/store. Tokens bound for
//! another node travel once per (token, node) through a credit-controlled
//! ring to the same-rail forwarder there, which fans them out to the local
//! target ranks. Combine mirrors the path: each node sums its weighted rows
//! per token and ships one partial back to the source rank.
//!
//! Every operation ends with a counter reset and an all-rank barrier.

use std::collections::BTreeMap;

use crate::config::{EpConfig, HtCombinePath};
use crate::error::{EpError, Result};
use crate::fabric::{Endpoint, NodeTopology, SignalBarrier, SignalRange, Window};
use crate::layout::MoeShape;
use crate::mem::GroupMemory;
use crate::sim::{join2, join_all};
use crate::tensor::{Dtype, NDTensor};

const META_FIELDS: usize = 6;
const ROW_INFO_BYTES: usize = 12;
const CHUNK_HEADER_BYTES: usize = 8;

/// Per-rank buffer sizes of the HT engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HtBufferPlan {
    /// Worst-case rows one rank can receive: `N * B * min(K, L)`.
    pub staging_rows: usize,
    pub row_bytes: usize,
    pub record_bytes: usize,
    pub chunk_bytes: usize,
    pub meta: usize,
    pub staging: usize,
    pub row_info: usize,
    pub fifo: usize,
    pub weights: usize,
    pub partials: usize,
    pub flat: usize,
}

impl HtBufferPlan {
    pub fn new(cfg: &EpConfig) -> Self {
        let (n, b, k, h) = (cfg.num_ranks, cfg.max_tokens_per_rank, cfg.top_k, cfg.hidden);
        let remote_nodes = cfg.num_nodes() - 1;
        let staging_rows = n * b * k.min(cfg.experts_per_rank());
        let row_bytes = h * cfg.token_dtype.byte_width();
        let record_bytes = 8 + 12 * k + row_bytes;
        let chunk_bytes = CHUNK_HEADER_BYTES + cfg.ht_chunk_tokens * record_bytes;
        let hierarchical = cfg.ht_combine_path == HtCombinePath::Hierarchical;
        Self {
            staging_rows,
            row_bytes,
            record_bytes,
            chunk_bytes,
            meta: n * 4 * (META_FIELDS + cfg.num_experts),
            staging: staging_rows * row_bytes,
            row_info: staging_rows * ROW_INFO_BYTES,
            fifo: remote_nodes * cfg.ht_fifo_depth * chunk_bytes,
            weights: if hierarchical { remote_nodes * b * k * 4 } else { 0 },
            partials: if hierarchical { cfg.num_nodes() * b * row_bytes } else { 0 },
            flat: if hierarchical { 0 } else { b * k * row_bytes },
        }
    }

    pub fn window_bytes(&self) -> usize {
        self.meta + self.staging + self.row_info + self.fifo + self.weights + self.partials + self.flat
    }
}

/// Routing metadata known to every rank after the exchange.
#[derive(Debug, Clone, Default)]
pub struct HtHandle {
    /// `counts[src][e]`: tokens of rank `src` routed to expert `e`.
    pub counts: Vec<Vec<u32>>,
    pub tokens_per_rank: Vec<usize>,
    /// `offsets[d][el][src]`: first output row on rank `d` for (local expert, source).
    offsets: Vec<Vec<Vec<usize>>>,
    pub recv_total: usize,
    pub expert_counts: Vec<usize>,
    /// (source rank, source token, routing position) of every received row.
    pub row_info: Vec<[u32; 3]>,
}

impl HtHandle {
    pub fn offset(&self, dst: usize, local_expert: usize, src: usize) -> usize {
        self.offsets[dst][local_expert][src]
    }

    /// Rows rank `d` receives.
    pub fn recv_rows(&self, shape: &MoeShape, d: usize) -> usize {
        shape.local_experts(d).map(|e| self.counts.iter().map(|c| c[e] as usize).sum::<usize>()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct HtDispatchOutputs {
    /// `[recv_total, H]`.
    pub tokens: NDTensor,
    /// `[L]` integer tensors receiving per-expert counts.
    pub counters: Vec<NDTensor>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HtOpReport {
    pub slots_used: u64,
    pub inter_node_msgs: u64,
    pub intra_node_msgs: u64,
    pub fifo_stalls: u64,
    pub copy_bytes: u64,
}

impl HtOpReport {
    fn merge(&mut self, o: HtOpReport) {
        self.slots_used += o.slots_used;
        self.inter_node_msgs += o.inter_node_msgs;
        self.intra_node_msgs += o.intra_node_msgs;
        self.fifo_stalls += o.fifo_stalls;
        self.copy_bytes += o.copy_bytes;
    }
}

#[derive(Debug, Clone, Copy)]
struct Signals {
    meta: usize,
    rows: usize,
    tail: SignalRange,
    credit: SignalRange,
    ready: usize,
    weights: SignalRange,
    partial: SignalRange,
    flat: usize,
}

#[derive(Debug)]
pub struct HtEngine {
    cfg: EpConfig,
    shape: MoeShape,
    topo: NodeTopology,
    plan: HtBufferPlan,
    meta: Window,
    staging: Window,
    row_info: Window,
    fifo: Option<Window>,
    weights: Option<Window>,
    partials: Option<Window>,
    flat: Option<Window>,
    sig: Signals,
    barrier: SignalBarrier,
}

/// Index of `node` among the nodes other than `me`.
fn compact(node: usize, me: usize) -> usize {
    debug_assert_ne!(node, me);
    if node < me {
        node
    } else {
        node - 1
    }
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

fn u32_at(bytes: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap())
}

fn dtype_code(d: Dtype) -> u32 {
    Dtype::ALL.iter().position(|&x| x == d).unwrap() as u32
}

impl HtEngine {
    pub fn new(ep: &Endpoint, cfg: &EpConfig, mem: &mut GroupMemory) -> Result<Self> {
        let plan = HtBufferPlan::new(cfg);
        let topo = ep.topology();
        let remote = topo.num_nodes() - 1;
        let mut opt = |label: &str, bytes: usize| -> Result<Option<Window>> {
            if bytes == 0 {
                Ok(None)
            } else {
                mem.register(ep, label, bytes).map(Some)
            }
        };
        let meta = opt("ht.meta", plan.meta)?.unwrap();
        let staging = opt("ht.staging", plan.staging)?.unwrap();
        let row_info = opt("ht.row_info", plan.row_info)?.unwrap();
        let fifo = opt("ht.fifo", plan.fifo)?;
        let weights = opt("ht.weights", plan.weights)?;
        let partials = opt("ht.partials", plan.partials)?;
        let flat = opt("ht.flat", plan.flat)?;
        let sig = Signals {
            meta: ep.register_signals(1).base,
            rows: ep.register_signals(1).base,
            tail: ep.register_signals(remote),
            credit: ep.register_signals(remote),
            ready: ep.register_signals(1).base,
            weights: ep.register_signals(remote),
            partial: ep.register_signals(topo.num_nodes()),
            flat: ep.register_signals(1).base,
        };
        Ok(Self {
            cfg: cfg.clone(),
            shape: MoeShape::from_config(cfg),
            topo,
            plan,
            meta,
            staging,
            row_info,
            fifo,
            weights,
            partials,
            flat,
            sig,
            barrier: SignalBarrier::new(ep),
        })
    }

    pub fn plan(&self) -> &HtBufferPlan {
        &self.plan
    }

    pub fn window_ids(&self) -> Vec<u32> {
        [Some(self.meta), Some(self.staging), Some(self.row_info), self.fifo, self.weights, self.partials, self.flat]
            .iter()
            .flatten()
            .map(|w| w.window_id)
            .collect()
    }

    fn meta_record_bytes(&self) -> usize {
        4 * (META_FIELDS + self.cfg.num_experts)
    }

    /// Collective: every rank publishes its per-expert counts to every rank.
    pub async fn exchange_metadata(&mut self, ep: &Endpoint, routing: &[u32]) -> Result<HtHandle> {
        let (n, e_total, k) = (self.cfg.num_ranks, self.cfg.num_experts, self.cfg.top_k);
        let me = ep.rank();
        let n_tok = routing.len() / k;
        let mut record = Vec::with_capacity(self.meta_record_bytes());
        let fields = [
            e_total as u32,
            k as u32,
            self.cfg.hidden as u32,
            dtype_code(self.cfg.token_dtype),
            n_tok as u32,
            self.cfg.max_tokens_per_rank as u32,
        ];
        let mut counts = vec![0u32; e_total];
        for &e in routing {
            counts[e as usize] += 1;
        }
        for v in fields.iter().chain(&counts) {
            record.extend_from_slice(&v.to_le_bytes());
        }
        let rb = self.meta_record_bytes();
        for d in 0..n {
            store(ep, d, &self.meta, me * rb, &record)?;
            flush(ep, d, self.sig.meta, 1)?;
        }
        ep.wait_signal(self.sig.meta, n as u64).await?;
        let all = ep.read_local(&self.meta, 0, n * rb)?;
        ep.reset_signals(SignalRange { base: self.sig.meta, len: 1 });
        self.barrier.arrive(ep).await?;

        let mut h = HtHandle::default();
        for src in 0..n {
            let rec = &all[src * rb..(src + 1) * rb];
            let got: Vec<u32> = (0..META_FIELDS).map(|i| u32_at(rec, i)).collect();
            if got[..4] != fields[..4] || got[5] != fields[5] {
                return Err(EpError::config(format!(
                    "rank {src} reports (E, K, H, dtype, B) = {:?}, rank {me} has {:?}",
                    [got[0], got[1], got[2], got[3], got[5]],
                    [fields[0], fields[1], fields[2], fields[3], fields[5]]
                )));
            }
            h.tokens_per_rank.push(got[4] as usize);
            h.counts.push((0..e_total).map(|e| u32_at(rec, META_FIELDS + e)).collect());
        }
        let l = self.shape.experts_per_rank;
        h.offsets = (0..n)
            .map(|d| {
                let mut acc = 0usize;
                (0..l)
                    .map(|el| {
                        let e = d * l + el;
                        (0..n)
                            .map(|src| {
                                let o = acc;
                                if e < e_total {
                                    acc += h.counts[src][e] as usize;
                                }
                                o
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        h.recv_total = h.recv_rows(&self.shape, me);
        h.expert_counts = (0..l)
            .map(|el| {
                let e = me * l + el;
                if e < e_total {
                    h.counts.iter().map(|c| c[e] as usize).sum()
                } else {
                    0
                }
            })
            .collect();
        if h.recv_total > self.plan.staging_rows {
            return Err(EpError::capacity(format!(
                "{} rows exceed worst-case staging of {}",
                h.recv_total, self.plan.staging_rows
            )));
        }
        Ok(h)
    }

    fn stage_row(&self, ep: &Endpoint, dst: usize, row: usize, info: [u32; 3], bytes: &[u8]) -> Result<()> {
        if row >= self.plan.staging_rows {
            return Err(EpError::capacity(format!("staging row {row} beyond {}", self.plan.staging_rows)));
        }
        ep.lsa_store(dst, self.staging.window_id, row * self.plan.row_bytes, bytes)?;
        let info_bytes: Vec<u8> = info.iter().flat_map(|v| v.to_le_bytes()).collect();
        ep.lsa_store(dst, self.row_info.window_id, row * ROW_INFO_BYTES, &info_bytes)?;
        ep.lsa_signal_add(dst, self.sig.rows, 1)
    }

    async fn send_chunk(
        &self,
        ep: &Endpoint,
        node: usize,
        records: &mut Vec<u8>,
        n_records: &mut usize,
        sent: &mut u64,
        last: bool,
        report: &mut HtOpReport,
    ) -> Result<()> {
        let me = ep.rank();
        let my_node = self.topo.node_of(me);
        let c = compact(node, my_node);
        let depth = self.cfg.ht_fifo_depth as u64;
        let credit = self.sig.credit.id(c);
        if *sent >= depth {
            let need = *sent + 1 - depth;
            if !ep.test_signal(credit, need) {
                report.fifo_stalls += 1;
                ep.wait_signal(credit, need).await?;
            }
        }
        let fwd = self.topo.rank_at(node, self.topo.rail_of(me));
        let slot = (*sent % depth) as usize;
        let mut chunk = Vec::with_capacity(CHUNK_HEADER_BYTES + records.len());
        chunk.extend_from_slice(&(*n_records as u32).to_le_bytes());
        chunk.extend_from_slice(&(last as u32).to_le_bytes());
        chunk.extend_from_slice(records);
        let fifo = self.fifo.expect("multi-node groups own a FIFO window");
        let src_slot = compact(my_node, node);
        ep.put(fwd, fifo.window_id, (src_slot * self.cfg.ht_fifo_depth + slot) * self.plan.chunk_bytes, &chunk)?;
        ep.signal_add(fwd, self.sig.tail.id(src_slot), 1)?;
        *sent += 1;
        records.clear();
        *n_records = 0;
        Ok(())
    }

    async fn dispatch_sender(&self, ep: &Endpoint, h: &HtHandle, routing: &[u32], tokens: &NDTensor) -> Result<HtOpReport> {
        let mut report = HtOpReport::default();
        let (k, chunk_tokens) = (self.cfg.top_k, self.cfg.ht_chunk_tokens);
        let me = ep.rank();
        let my_node = self.topo.node_of(me);
        let nodes = self.topo.num_nodes();
        let mut seen = vec![0usize; self.cfg.num_experts];
        let mut records: Vec<Vec<u8>> = vec![Vec::new(); nodes];
        let mut n_records = vec![0usize; nodes];
        let mut sent = vec![0u64; nodes];

        for (t, row) in routing.chunks_exact(k).enumerate() {
            let bytes = tokens.read_row_bytes(t);
            let mut remote: BTreeMap<usize, Vec<[u32; 3]>> = BTreeMap::new();
            for (kk, &e) in row.iter().enumerate() {
                let e = e as usize;
                let d = self.shape.rem_dp(e);
                let pos = h.offset(d, self.shape.local_index(e), me) + seen[e];
                seen[e] += 1;
                if self.topo.node_of(d) == my_node {
                    self.stage_row(ep, d, pos, [me as u32, t as u32, kk as u32], &bytes)?;
                    if d != me {
                        report.intra_node_msgs += 1;
                    }
                } else {
                    remote.entry(self.topo.node_of(d)).or_default().push([kk as u32, e as u32, pos as u32]);
                }
            }
            for (node, targets) in remote {
                let rec = &mut records[node];
                let start = rec.len();
                rec.extend_from_slice(&(t as u32).to_le_bytes());
                rec.extend_from_slice(&(targets.len() as u32).to_le_bytes());
                for v in targets.iter().flatten() {
                    rec.extend_from_slice(&v.to_le_bytes());
                }
                rec.resize(start + 8 + 12 * k, 0);
                rec.extend_from_slice(&bytes);
                n_records[node] += 1;
                report.inter_node_msgs += 1;
                if n_records[node] == chunk_tokens {
                    self.send_chunk(ep, node, &mut records[node], &mut n_records[node], &mut sent[node], false, &mut report)
                        .await?;
                }
            }
        }
        for node in (0..nodes).filter(|&n| n != my_node) {
            self.send_chunk(ep, node, &mut records[node], &mut n_records[node], &mut sent[node], true, &mut report)
                .await?;
        }
        for node in (0..nodes).filter(|&n| n != my_node) {
            ep.wait_signal(self.sig.credit.id(compact(node, my_node)), sent[node]).await?;
        }
        Ok(report)
    }

    /// Drains the ring fed by `src` and fans each record out on this node.
    async fn drain(&self, ep: &Endpoint, src: usize) -> Result<HtOpReport> {
        let mut report = HtOpReport::default();
        let me = ep.rank();
        let my_node = self.topo.node_of(me);
        let c = compact(self.topo.node_of(src), my_node);
        let depth = self.cfg.ht_fifo_depth;
        let fifo = self.fifo.expect("multi-node groups own a FIFO window");
        let (k, rb, cb) = (self.cfg.top_k, self.plan.record_bytes, self.plan.chunk_bytes);
        let mut consumed = 0u64;
        loop {
            ep.wait_signal(self.sig.tail.id(c), consumed + 1).await?;
            let slot = (consumed % depth as u64) as usize;
            let chunk = ep.read_local(&fifo, (c * depth + slot) * cb, cb)?;
            let n_records = u32_at(&chunk, 0) as usize;
            let last = u32_at(&chunk, 1) != 0;
            for i in 0..n_records {
                let rec = &chunk[CHUNK_HEADER_BYTES + i * rb..CHUNK_HEADER_BYTES + (i + 1) * rb];
                let t = u32_at(rec, 0);
                let n_targets = u32_at(rec, 1) as usize;
                let token = &rec[8 + 12 * k..];
                for j in 0..n_targets {
                    let kk = u32_at(rec, 2 + 3 * j);
                    let e = u32_at(rec, 3 + 3 * j) as usize;
                    let row = u32_at(rec, 4 + 3 * j) as usize;
                    let d = self.shape.rem_dp(e);
                    if self.topo.node_of(d) != my_node {
                        return Err(EpError::invalid(format!("record for expert {e} reached node {my_node}")));
                    }
                    self.stage_row(ep, d, row, [src as u32, t, kk], token)?;
                    if d != me {
                        report.intra_node_msgs += 1;
                    }
                }
            }
            consumed += 1;
            ep.signal_add(src, self.sig.credit.id(compact(my_node, self.topo.node_of(src))), 1)?;
            if last {
                return Ok(report);
            }
        }
    }

    async fn forwarder(&self, ep: &Endpoint) -> Result<HtOpReport> {
        let me = ep.rank();
        let my_node = self.topo.node_of(me);
        let rail = self.topo.rail_of(me);
        let futs = (0..self.topo.num_nodes())
            .filter(|&n| n != my_node)
            .map(|n| Box::pin(self.drain(ep, self.topo.rank_at(n, rail))) as std::pin::Pin<Box<dyn std::future::Future<Output = _>>>)
            .collect();
        let mut total = HtOpReport::default();
        for r in join_all(futs).await? {
            total.merge(r);
        }
        Ok(total)
    }

    async fn finish(&mut self, ep: &Endpoint) -> Result<()> {
        let s = self.sig;
        for single in [s.rows, s.ready, s.flat, s.meta] {
            ep.reset_signals(SignalRange { base: single, len: 1 });
        }
        for range in [s.tail, s.credit, s.weights, s.partial] {
            ep.reset_signals(range);
        }
        self.barrier.arrive(ep).await
    }

    pub async fn dispatch(
        &mut self,
        ep: &Endpoint,
        h: &mut HtHandle,
        routing: &[u32],
        tokens: &NDTensor,
        out: &HtDispatchOutputs,
    ) -> Result<HtOpReport> {
        let this = &*self;
        let recv = async {
            ep.wait_signal(this.sig.rows, h.recv_total as u64).await?;
            Ok(())
        };
        let ((mut report, fwd), ()) =
            join2(join2(this.dispatch_sender(ep, h, routing, tokens), this.forwarder(ep)), recv).await?;
        report.merge(fwd);

        let rb = self.plan.row_bytes;
        for i in 0..h.recv_total {
            let bytes = ep.read_local(&self.staging, i * rb, rb)?;
            out.tokens.write_row_bytes(i, &bytes);
        }
        let info = ep.read_local(&self.row_info, 0, h.recv_total * ROW_INFO_BYTES)?;
        h.row_info = info
            .chunks_exact(ROW_INFO_BYTES)
            .map(|c| [u32_at(c, 0), u32_at(c, 1), u32_at(c, 2)])
            .collect();
        report.copy_bytes += (h.recv_total * rb) as u64;
        report.slots_used += h.recv_total as u64;
        let counts: Vec<i64> = h.expert_counts.iter().map(|&c| c as i64).collect();
        for c in &out.counters {
            c.write_i64(&counts)?;
        }
        self.finish(ep).await?;
        Ok(report)
    }

    pub async fn combine(
        &mut self,
        ep: &Endpoint,
        h: &HtHandle,
        routing: &[u32],
        expert_out: &NDTensor,
        weights: &NDTensor,
        tokens_out: &NDTensor,
    ) -> Result<HtOpReport> {
        let report = match self.cfg.ht_combine_path {
            HtCombinePath::Hierarchical => self.combine_hierarchical(ep, h, routing, expert_out, weights, tokens_out).await?,
            HtCombinePath::Flat => self.combine_flat(ep, h, routing, expert_out, weights, tokens_out).await?,
        };
        self.finish(ep).await?;
        Ok(report)
    }

    async fn combine_hierarchical(
        &self,
        ep: &Endpoint,
        h: &HtHandle,
        routing: &[u32],
        expert_out: &NDTensor,
        weights: &NDTensor,
        tokens_out: &NDTensor,
    ) -> Result<HtOpReport> {
        let mut report = HtOpReport::default();
        let me = ep.rank();
        let my_node = self.topo.node_of(me);
        let (b, k, rb) = (self.cfg.max_tokens_per_rank, self.cfg.top_k, self.plan.row_bytes);

        // registered copy of the expert outputs and their row metadata
        for i in 0..h.recv_total {
            ep.write_local(&self.staging, i * rb, &expert_out.read_row_bytes(i))?;
            let info: Vec<u8> = h.row_info[i].iter().flat_map(|v| v.to_le_bytes()).collect();
            ep.write_local(&self.row_info, i * ROW_INFO_BYTES, &info)?;
        }
        report.copy_bytes += (h.recv_total * rb) as u64;
        for peer in self.topo.node_ranks(my_node) {
            ep.lsa_signal_add(peer, self.sig.ready, 1)?;
        }

        let own_weights: Vec<f32> = (0..weights.rows()).flat_map(|t| weights.read_row_f32(t)).collect();
        if self.topo.num_nodes() > 1 {
            let bytes: Vec<u8> = own_weights.iter().flat_map(|w| w.to_le_bytes()).collect();
            let win = self.weights.expect("hierarchical multi-node groups own a weights window");
            for node in (0..self.topo.num_nodes()).filter(|&n| n != my_node) {
                let agg = self.topo.rank_at(node, self.topo.rail_of(me));
                let slot = compact(my_node, node);
                ep.put(agg, win.window_id, slot * b * k * 4, &bytes)?;
                ep.signal_add(agg, self.sig.weights.id(slot), 1)?;
            }
        }

        let (agg, reduce) = join2(self.aggregate(ep, h, &own_weights), self.reduce_partials(ep, routing, tokens_out)).await?;
        report.merge(agg);
        report.merge(reduce);
        Ok(report)
    }

    /// Node-level partial sums for this rank's own tokens and for the
    /// same-rail ranks of other nodes.
    async fn aggregate(&self, ep: &Endpoint, h: &HtHandle, own_weights: &[f32]) -> Result<HtOpReport> {
        let mut report = HtOpReport::default();
        let me = ep.rank();
        let my_node = self.topo.node_of(me);
        let (b, k, rb) = (self.cfg.max_tokens_per_rank, self.cfg.top_k, self.plan.row_bytes);
        let cd = self.cfg.combine_dtype();
        let cw = cd.byte_width();
        let partials = self.partials.expect("hierarchical groups own a partials window");
        ep.wait_signal(self.sig.ready, self.topo.ranks_per_node() as u64).await?;

        let sources: Vec<usize> =
            (0..self.topo.num_nodes()).map(|n| self.topo.rank_at(n, self.topo.rail_of(me))).collect();
        for src in sources {
            let src_node = self.topo.node_of(src);
            let w: Vec<f32> = if src == me {
                own_weights.to_vec()
            } else {
                let slot = compact(src_node, my_node);
                ep.wait_signal(self.sig.weights.id(slot), 1).await?;
                let win = self.weights.unwrap();
                let bytes = ep.read_local(&win, slot * b * k * 4, h.tokens_per_rank[src] * k * 4)?;
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
            };

            let mut contribs: Vec<(u32, u32, usize, usize)> = Vec::new();
            for d in self.topo.node_ranks(my_node) {
                for e in self.shape.local_experts(d) {
                    let start = h.offset(d, self.shape.local_index(e), src);
                    for row in start..start + h.counts[src][e] as usize {
                        let info = ep.lsa_load(d, self.row_info.window_id, row * ROW_INFO_BYTES, ROW_INFO_BYTES)?;
                        if u32_at(&info, 0) as usize != src {
                            return Err(EpError::invalid(format!("row {row} on rank {d} not from rank {src}")));
                        }
                        contribs.push((u32_at(&info, 1), u32_at(&info, 2), d, row));
                    }
                }
            }
            contribs.sort_unstable();

            let mut i = 0;
            while i < contribs.len() {
                let t = contribs[i].0 as usize;
                let mut acc = vec![0f32; self.cfg.hidden];
                while i < contribs.len() && contribs[i].0 as usize == t {
                    let (_, kk, d, row) = contribs[i];
                    let wk = w[t * k + kk as usize];
                    let bytes = ep.lsa_load(d, self.staging.window_id, row * rb, rb)?;
                    for (a, c) in acc.iter_mut().zip(bytes.chunks_exact(cw)) {
                        *a += wk * cd.decode_f32(c);
                    }
                    i += 1;
                }
                let mut bytes = vec![0u8; rb];
                for (v, o) in acc.iter().zip(bytes.chunks_exact_mut(cw)) {
                    cd.encode_f32(*v, o);
                }
                let offset = (my_node * b + t) * rb;
                if src == me {
                    ep.write_local(&partials, offset, &bytes)?;
                } else {
                    ep.put(src, partials.window_id, offset, &bytes)?;
                    report.inter_node_msgs += 1;
                }
            }
            if src == me {
                ep.signal_add_local(self.sig.partial.id(my_node), 1)?;
            } else {
                ep.signal_add(src, self.sig.partial.id(my_node), 1)?;
            }
        }
        Ok(report)
    }

    /// Final reduction on the source rank, nodes in ascending order.
    async fn reduce_partials(&self, ep: &Endpoint, routing: &[u32], tokens_out: &NDTensor) -> Result<HtOpReport> {
        let mut report = HtOpReport::default();
        let (b, k, rb) = (self.cfg.max_tokens_per_rank, self.cfg.top_k, self.plan.row_bytes);
        let cd = self.cfg.combine_dtype();
        let cw = cd.byte_width();
        let partials = self.partials.unwrap();
        for n in 0..self.topo.num_nodes() {
            ep.wait_signal(self.sig.partial.id(n), 1).await?;
        }
        for (t, row) in routing.chunks_exact(k).enumerate() {
            let mut acc = vec![0f32; self.cfg.hidden];
            for n in 0..self.topo.num_nodes() {
                if !row.iter().any(|&e| self.topo.node_of(self.shape.rem_dp(e as usize)) == n) {
                    continue;
                }
                ep.with_local(&partials, (n * b + t) * rb, rb, |bytes| {
                    for (a, c) in acc.iter_mut().zip(bytes.chunks_exact(cw)) {
                        *a += cd.decode_f32(c);
                    }
                })?;
                report.slots_used += 1;
            }
            tokens_out.write_row_f32(t, &acc);
        }
        Ok(report)
    }

    /// Debug path: every expert row goes straight back to its source.
    async fn combine_flat(
        &self,
        ep: &Endpoint,
        h: &HtHandle,
        routing: &[u32],
        expert_out: &NDTensor,
        weights: &NDTensor,
        tokens_out: &NDTensor,
    ) -> Result<HtOpReport> {
        let mut report = HtOpReport::default();
        let me = ep.rank();
        let (k, rb) = (self.cfg.top_k, self.plan.row_bytes);
        let cd = self.cfg.combine_dtype();
        let cw = cd.byte_width();
        let flat = self.flat.expect("flat groups own a flat window");
        for (i, &[src, t, kk]) in h.row_info.iter().enumerate() {
            let src = src as usize;
            store(ep, src, &flat, (t as usize * k + kk as usize) * rb, &expert_out.read_row_bytes(i))?;
            if !self.topo.same_node(me, src) {
                report.inter_node_msgs += 1;
            } else if src != me {
                report.intra_node_msgs += 1;
            }
        }
        for dst in 0..self.cfg.num_ranks {
            flush(ep, dst, self.sig.flat, 1)?;
        }
        ep.wait_signal(self.sig.flat, self.cfg.num_ranks as u64).await?;
        for t in 0..routing.len() / k {
            let w = weights.read_row_f32(t);
            let mut acc = vec![0f32; self.cfg.hidden];
            for (kk, wk) in w.iter().enumerate() {
                ep.with_local(&flat, (t * k + kk) * rb, rb, |bytes| {
                    for (a, c) in acc.iter_mut().zip(bytes.chunks_exact(cw)) {
                        *a += wk * cd.decode_f32(c);
                    }
                })?;
                report.slots_used += 1;
            }
            tokens_out.write_row_f32(t, &acc);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_sizes() {
        let cfg = EpConfig {
            algorithm: crate::Algorithm::Ht,
            num_ranks: 4,
            ranks_per_node: 2,
            num_experts: 8,
            top_k: 4,
            hidden: 16,
            max_tokens_per_rank: 8,
            ..Default::default()
        };
        let p = HtBufferPlan::new(&cfg);
        assert_eq!(p.staging_rows, 4 * 8 * 2);
        assert_eq!(p.row_bytes, 64);
        assert_eq!(p.record_bytes, 8 + 48 + 64);
        assert_eq!(p.fifo, 8 * (8 + 4 * p.record_bytes));
        assert_eq!(p.partials, 2 * 8 * 64);
        assert_eq!(p.flat, 0);
        let single = HtBufferPlan::new(&EpConfig { ranks_per_node: 4, ..cfg });
        assert_eq!(single.fifo, 0);
        assert_eq!(single.weights, 0);
    }

    #[test]
    fn compact_node_index() {
        assert_eq!(compact(0, 1), 0);
        assert_eq!(compact(2, 1), 1);
        assert_eq!(compact(3, 0), 2);
    }
}
