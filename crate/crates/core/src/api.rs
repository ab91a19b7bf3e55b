//! Unified per-rank surface: group and handle lifecycle, dispatch, combine,
//! complete and the received-token query. Calls route to the LL or HT
//! engine according to the group configuration.
//!
//! Tensors are located by tag. Each list accepts a fixed set of tags,
//! `NONE` entries are ignored, and a tag may appear only once across the
//! lists of one call. All validation happens before any fabric traffic.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::config::{Algorithm, EpConfig};
use crate::error::{EpError, ErrorCode, Result};
use crate::fabric::Endpoint;
use crate::ht::{HtDispatchOutputs, HtEngine, HtHandle};
use crate::layout::validate_routing;
use crate::ll::{FlushRecord, LlCombineRecv, LlDispatchOutputs, LlEngine, LlHandle};
use crate::mem::{AllocationHooks, AllocationReport, GroupMemory};
use crate::stats::{OpName, OpStats};
use crate::tensor::{Dtype, NDTensor, TensorTag};

static NEXT_GROUP_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HandleState {
    Created,
    Dispatched,
    DispatchStaged,
    Combined,
    CombineStaged,
    Destroyed,
}

#[derive(Debug)]
enum Engine {
    Ll(LlEngine),
    Ht(HtEngine),
}

/// Long-lived per-rank resources of an expert-parallel group.
#[derive(Debug)]
pub struct EpGroup {
    uid: u64,
    cfg: EpConfig,
    ep: Endpoint,
    mem: GroupMemory,
    engine: Engine,
    next_handle: u64,
    staged: usize,
    destroyed: bool,
    stats: Vec<OpStats>,
}

/// Per-pass routing state shared by matching dispatch and combine calls.
#[derive(Debug)]
pub struct EpHandle {
    id: u64,
    group_uid: u64,
    routing: Vec<u32>,
    tokens: usize,
    state: HandleState,
    ll: LlHandle,
    ht: Option<HtHandle>,
    pending: Option<OpStats>,
}

impl EpHandle {
    pub fn state(&self) -> HandleState {
        self.state
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens
    }

    pub fn routing(&self) -> &[u32] {
        &self.routing
    }

    /// LL receive cache (empty for HT handles).
    pub fn ll_state(&self) -> &LlHandle {
        &self.ll
    }

    pub fn ht_state(&self) -> Option<&HtHandle> {
        self.ht.as_ref()
    }
}

fn tag_name(tag: TensorTag) -> &'static str {
    match tag {
        TensorTag::Tokens => "TOKENS",
        TensorTag::TopkIdx => "TOPK_IDX",
        TensorTag::TopkWeights => "TOPK_WEIGHTS",
        TensorTag::Scales => "SCALES",
        TensorTag::RecvExpertCounterDevice => "RECV_EXPERT_COUNTER_DEVICE",
        TensorTag::RecvExpertCounterHost => "RECV_EXPERT_COUNTER_HOST",
        TensorTag::None => "NONE",
        TensorTag::TokensPerExperts => "TOKENS_PER_EXPERTS",
    }
}

const COUNTER_TAGS: [TensorTag; 3] =
    [TensorTag::RecvExpertCounterDevice, TensorTag::RecvExpertCounterHost, TensorTag::TokensPerExperts];

/// Collects tagged tensors from several lists with exactly-one semantics.
fn collect_tags(call: &str, lists: &[(&str, &[NDTensor], &[TensorTag])]) -> Result<BTreeMap<TensorTag, NDTensor>> {
    let mut found = BTreeMap::new();
    for (list_name, list, allowed) in lists {
        for t in list.iter() {
            if t.tag() == TensorTag::None {
                continue;
            }
            if !allowed.contains(&t.tag()) {
                return Err(EpError::tag(format!("{call}: unexpected {} tensor in {list_name}", tag_name(t.tag()))));
            }
            if found.insert(t.tag(), t.clone()).is_some() {
                return Err(EpError::tag(format!("{call}: {} given more than once", tag_name(t.tag()))));
            }
        }
    }
    Ok(found)
}

fn require(found: &BTreeMap<TensorTag, NDTensor>, call: &str, tag: TensorTag) -> Result<NDTensor> {
    found
        .get(&tag)
        .cloned()
        .ok_or_else(|| EpError::tag(format!("{call}: missing {} tensor", tag_name(tag))))
}

fn check_dtype(t: &NDTensor, want: Dtype, what: &str) -> Result<()> {
    if t.dtype() != want {
        return Err(EpError::tag(format!("{what} must be {want}, got {}", t.dtype())));
    }
    Ok(())
}

fn check_int(t: &NDTensor, what: &str) -> Result<()> {
    if t.dtype().is_float() {
        return Err(EpError::tag(format!("{what} must be an integer tensor, got {}", t.dtype())));
    }
    Ok(())
}

fn check_shape(t: &NDTensor, want: &[usize], what: &str) -> Result<()> {
    if t.shape() != want {
        return Err(EpError::shape(format!("{what} has shape {:?}, expected {want:?}", t.shape())));
    }
    Ok(())
}

/// Reads a `[B', K]` routing tensor into expert ids.
fn read_routing(topk: &NDTensor, cfg: &EpConfig) -> Result<Vec<u32>> {
    if topk.shape().len() != 2 || topk.shape()[1] != cfg.top_k {
        return Err(EpError::invalid(format!("topk_idx shape {:?} is not [tokens, {}]", topk.shape(), cfg.top_k)));
    }
    if topk.shape()[0] > cfg.max_tokens_per_rank {
        return Err(EpError::invalid(format!(
            "{} tokens exceed max_tokens_per_rank {}",
            topk.shape()[0],
            cfg.max_tokens_per_rank
        )));
    }
    let ids = topk.to_i64_vec();
    if let Some(&bad) = ids.iter().find(|&&e| e < 0 || e >= cfg.num_experts as i64) {
        return Err(EpError::invalid(format!("expert id {bad} outside [0, {})", cfg.num_experts)));
    }
    let routing: Vec<u32> = ids.into_iter().map(|e| e as u32).collect();
    validate_routing(&routing, cfg.top_k, cfg.num_experts)?;
    Ok(routing)
}

impl EpGroup {
    /// Collective: every rank of the fabric must call with an equal config.
    pub async fn create(ep: Endpoint, cfg: EpConfig, hooks: Option<Box<dyn AllocationHooks>>) -> Result<Self> {
        let local = cfg.validate().and_then(|()| {
            let topo = ep.topology();
            if cfg.num_ranks != topo.num_ranks() || cfg.ranks_per_node != topo.ranks_per_node() {
                return Err(EpError::invalid(format!(
                    "config describes {} ranks ({} per node), fabric has {} ({} per node)",
                    cfg.num_ranks,
                    cfg.ranks_per_node,
                    topo.num_ranks(),
                    topo.ranks_per_node()
                )));
            }
            Ok(())
        });
        let encoded = serde_json::to_vec(&cfg).expect("config serializes");
        let mut msg = vec![local.is_ok() as u8];
        msg.extend_from_slice(&encoded);
        let all = ep.bootstrap_allgather(msg).await?;
        local?;
        if let Some(r) = all.iter().position(|m| m[0] == 0) {
            return Err(EpError::config(format!("rank {r} passed an invalid group config")));
        }
        if let Some(r) = all.iter().position(|m| m[1..] != encoded[..]) {
            return Err(EpError::config(format!("rank {r} passed a different group config than rank {}", ep.rank())));
        }

        let mut mem = GroupMemory::new(hooks);
        let engine = match cfg.algorithm {
            Algorithm::Ll => LlEngine::new(&ep, &cfg, &mut mem).map(Engine::Ll),
            Algorithm::Ht => HtEngine::new(&ep, &cfg, &mut mem).map(Engine::Ht),
        };
        let window_ids = match &engine {
            Ok(Engine::Ll(e)) => e.window_ids(),
            Ok(Engine::Ht(e)) => e.window_ids(),
            Err(_) => Vec::new(),
        };
        let mut status = vec![engine.is_ok() as u8];
        status.extend(window_ids.iter().flat_map(|w| w.to_le_bytes()));
        let all = ep.bootstrap_allgather(status.clone()).await?;
        let failed = all.iter().position(|m| m[0] == 0);
        let engine = match (engine, failed) {
            (Ok(e), None) => e,
            (Err(e), _) => {
                mem.release_all(&ep)?;
                return Err(e);
            }
            (Ok(_), Some(r)) => {
                mem.release_all(&ep)?;
                return Err(EpError::capacity(format!("rank {r} could not allocate its group buffers")));
            }
        };
        if all.iter().any(|m| *m != status) {
            mem.release_all(&ep)?;
            return Err(EpError::config("ranks registered group windows in different orders"));
        }
        Ok(Self {
            uid: NEXT_GROUP_UID.fetch_add(1, Ordering::Relaxed),
            cfg,
            ep,
            mem,
            engine,
            next_handle: 0,
            staged: 0,
            destroyed: false,
            stats: Vec::new(),
        })
    }

    pub fn config(&self) -> &EpConfig {
        &self.cfg
    }

    pub fn rank(&self) -> usize {
        self.ep.rank()
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.ep
    }

    pub fn allocation_report(&self) -> &AllocationReport {
        self.mem.report()
    }

    /// Statistics of every completed operation since the last call.
    pub fn take_stats(&mut self) -> Vec<OpStats> {
        std::mem::take(&mut self.stats)
    }

    /// LL counter flushes issued by this rank since the last call.
    pub fn take_flush_log(&mut self) -> Vec<FlushRecord> {
        match &mut self.engine {
            Engine::Ll(e) => e.take_flush_log(),
            Engine::Ht(_) => Vec::new(),
        }
    }

    /// Fault injection for mutation testing of the optimized combine index.
    pub fn set_debug_combine_slot_shift(&mut self, on: bool) {
        if let Engine::Ll(e) = &mut self.engine {
            e.debug_combine_slot_shift = on;
        }
    }

    fn check_live(&self) -> Result<()> {
        if self.destroyed {
            return Err(EpError::state("group already destroyed"));
        }
        Ok(())
    }

    fn check_handle(&self, h: &EpHandle) -> Result<()> {
        self.check_live()?;
        if h.group_uid != self.uid {
            return Err(EpError::invalid("handle belongs to a different group"));
        }
        if h.state == HandleState::Destroyed {
            return Err(EpError::state("handle already destroyed"));
        }
        Ok(())
    }

    fn begin_stats(&self, op: OpName) -> OpStats {
        OpStats::new(op, self.cfg.algorithm, self.ep.rank())
    }

    fn finish_stats(&mut self, mut s: OpStats) {
        s.buffer_bytes = self.mem.report().total_bytes() as u64;
        self.stats.push(s);
    }

    /// Releases every buffer. Fails while a staged operation is pending.
    pub fn destroy(&mut self) -> Result<()> {
        self.check_live()?;
        if self.staged > 0 {
            return Err(EpError::state(format!("{} staged operation(s) still pending", self.staged)));
        }
        self.mem.release_all(&self.ep)?;
        self.destroyed = true;
        Ok(())
    }

    /// LL: snapshot only. HT: collective metadata exchange.
    pub async fn create_handle(&mut self, topk_idx: &NDTensor) -> Result<EpHandle> {
        self.check_live()?;
        if topk_idx.tag() != TensorTag::TopkIdx {
            return Err(EpError::tag(format!("create_handle expects a TOPK_IDX tensor, got {}", tag_name(topk_idx.tag()))));
        }
        check_int(topk_idx, "topk_idx")?;
        let routing = read_routing(topk_idx, &self.cfg)?;
        let tokens = routing.len() / self.cfg.top_k;
        let ht = match &mut self.engine {
            Engine::Ll(_) => None,
            Engine::Ht(e) => Some(e.exchange_metadata(&self.ep, &routing).await?),
        };
        let id = self.next_handle;
        self.next_handle += 1;
        Ok(EpHandle {
            id,
            group_uid: self.uid,
            routing,
            tokens,
            state: HandleState::Created,
            ll: LlHandle::default(),
            ht,
            pending: None,
        })
    }

    pub fn destroy_handle(&mut self, h: &mut EpHandle) -> Result<()> {
        self.check_handle(h)?;
        if matches!(h.state, HandleState::DispatchStaged | HandleState::CombineStaged) {
            return Err(EpError::state("handle has a staged operation pending; call complete first"));
        }
        if let Engine::Ll(e) = &mut self.engine {
            e.release_handle(h.id, &h.ll);
        }
        h.state = HandleState::Destroyed;
        h.ll = LlHandle::default();
        h.ht = None;
        Ok(())
    }

    pub fn get_num_recv_tokens(&self, h: &EpHandle) -> Result<usize> {
        self.check_handle(h)?;
        match (&h.ht, h.state) {
            (Some(ht), _) => Ok(ht.recv_total),
            (None, HandleState::Dispatched | HandleState::Combined | HandleState::CombineStaged) => {
                Ok(h.ll.recv_counts.iter().sum())
            }
            (None, s) => Err(EpError::state(format!("LL token count unknown until dispatch completes (state {s:?})"))),
        }
    }

    pub async fn dispatch(
        &mut self,
        h: &mut EpHandle,
        inputs: &[NDTensor],
        outputs: &[NDTensor],
        local: &[NDTensor],
        send_only: bool,
    ) -> Result<()> {
        self.check_handle(h)?;
        if !matches!(h.state, HandleState::Created | HandleState::Combined) {
            return Err(EpError::state(format!("dispatch not allowed in state {:?}", h.state)));
        }
        if send_only && self.cfg.algorithm == Algorithm::Ht {
            return Err(EpError::state("staged execution is only available in LL mode"));
        }
        let fp8 = self.cfg.token_dtype == Dtype::FP8;
        let scale_tag: &[TensorTag] = if fp8 { &[TensorTag::Scales] } else { &[] };
        let in_tags: Vec<TensorTag> = [TensorTag::Tokens, TensorTag::TopkIdx].iter().chain(scale_tag).copied().collect();
        let out_tags: Vec<TensorTag> = [TensorTag::Tokens].iter().chain(scale_tag).chain(&COUNTER_TAGS).copied().collect();
        let found_in = collect_tags("dispatch", &[("inputs", inputs, &in_tags)])?;
        let found_out =
            collect_tags("dispatch", &[("outputs", outputs, &out_tags), ("local tensors", local, &COUNTER_TAGS)])?;

        let (b, hd, k) = (h.tokens, self.cfg.hidden, self.cfg.top_k);
        let spt = self.cfg.scales_per_token();
        let tokens = require(&found_in, "dispatch", TensorTag::Tokens)?;
        check_dtype(&tokens, self.cfg.token_dtype, "dispatch TOKENS input")?;
        check_shape(&tokens, &[b, hd], "dispatch TOKENS input")?;
        let scales = if fp8 {
            let s = require(&found_in, "dispatch", TensorTag::Scales)
                .map_err(|_| EpError::tag("fp8 dispatch expects a corresponding SCALES tensor"))?;
            check_dtype(&s, Dtype::F32, "SCALES input")?;
            check_shape(&s, &[b, spt], "SCALES input")?;
            Some(s)
        } else {
            None
        };
        if let Some(idx) = found_in.get(&TensorTag::TopkIdx) {
            check_int(idx, "TOPK_IDX input")?;
            check_shape(idx, &[b, k], "TOPK_IDX input")?;
            if idx.to_i64_vec().iter().zip(&h.routing).any(|(&a, &r)| a != r as i64) {
                return Err(EpError::invalid("TOPK_IDX input differs from the routing the handle was created with"));
            }
        }

        let l = self.cfg.experts_per_rank();
        let out_tokens = require(&found_out, "dispatch", TensorTag::Tokens)?;
        check_dtype(&out_tokens, self.cfg.token_dtype, "dispatch TOKENS output")?;
        let counters: Vec<NDTensor> = COUNTER_TAGS.iter().filter_map(|t| found_out.get(t).cloned()).collect();
        for c in &counters {
            check_int(c, tag_name(c.tag()))?;
            check_shape(c, &[l], tag_name(c.tag()))?;
        }

        let mut stats = self.begin_stats(OpName::Dispatch);
        let before = self.ep.counters();
        match &mut self.engine {
            Engine::Ll(engine) => {
                let cap = self.cfg.ll_expert_capacity();
                check_shape(&out_tokens, &[l, cap, hd], "LL dispatch TOKENS output")?;
                let out_scales = if fp8 {
                    let s = require(&found_out, "dispatch", TensorTag::Scales)
                        .map_err(|_| EpError::tag("fp8 dispatch expects a SCALES output tensor"))?;
                    check_dtype(&s, Dtype::F32, "SCALES output")?;
                    check_shape(&s, &[l, cap, spt], "SCALES output")?;
                    Some(s)
                } else {
                    None
                };
                let outs = LlDispatchOutputs { tokens: out_tokens, scales: out_scales, counters };
                engine.dispatch_send(&self.ep, &mut h.ll, h.id, &h.routing, &tokens, scales.as_ref()).await?;
                stats.add_traffic(&self.ep.counters().since(&before));
                if send_only {
                    h.ll.pending_dispatch = Some(outs);
                    h.pending = Some(stats);
                    h.state = HandleState::DispatchStaged;
                    self.staged += 1;
                    return Ok(());
                }
                let before = self.ep.counters();
                stats.slots_used += engine.dispatch_recv(&self.ep, &mut h.ll, &outs).await?;
                stats.add_traffic(&self.ep.counters().since(&before));
            }
            Engine::Ht(engine) => {
                let ht = h.ht.as_mut().expect("HT handles carry metadata");
                check_shape(&out_tokens, &[ht.recv_total, hd], "HT dispatch TOKENS output")?;
                let outs = HtDispatchOutputs { tokens: out_tokens, counters };
                let report = engine.dispatch(&self.ep, ht, &h.routing, &tokens, &outs).await?;
                stats.add_traffic(&self.ep.counters().since(&before));
                stats.slots_used += report.slots_used;
                stats.inter_node_msgs += report.inter_node_msgs;
                stats.intra_node_msgs += report.intra_node_msgs;
                stats.fifo_stalls += report.fifo_stalls;
                stats.copy_bytes += report.copy_bytes;
            }
        }
        h.state = HandleState::Dispatched;
        self.finish_stats(stats);
        Ok(())
    }

    pub async fn combine(
        &mut self,
        h: &mut EpHandle,
        inputs: &[NDTensor],
        outputs: &[NDTensor],
        local: &[NDTensor],
        send_only: bool,
    ) -> Result<()> {
        self.check_handle(h)?;
        if h.state != HandleState::Dispatched {
            return Err(EpError::state(format!("combine requires a completed dispatch (state {:?})", h.state)));
        }
        if send_only && self.cfg.algorithm == Algorithm::Ht {
            return Err(EpError::state("staged execution is only available in LL mode"));
        }
        let weight_tag = [TensorTag::TopkWeights];
        let found = collect_tags(
            "combine",
            &[
                ("inputs", inputs, &[TensorTag::Tokens, TensorTag::TopkWeights, TensorTag::TopkIdx]),
                ("local tensors", local, &weight_tag),
            ],
        )?;
        let found_out = collect_tags("combine", &[("outputs", outputs, &[TensorTag::Tokens])])?;
        let (b, hd, k) = (h.tokens, self.cfg.hidden, self.cfg.top_k);
        let cd = self.cfg.combine_dtype();
        let expert_out = require(&found, "combine", TensorTag::Tokens)?;
        check_dtype(&expert_out, cd, "combine TOKENS input")?;
        let weights = match found.get(&TensorTag::TopkWeights) {
            Some(w) => {
                if !w.dtype().is_float() {
                    return Err(EpError::tag(format!("TOPK_WEIGHTS must be floating point, got {}", w.dtype())));
                }
                check_shape(w, &[b, k], "TOPK_WEIGHTS")?;
                w.clone()
            }
            None => NDTensor::from_f32(&[b, k], Dtype::F32, TensorTag::TopkWeights, &vec![1.0; b * k])?,
        };
        if let Some(idx) = found.get(&TensorTag::TopkIdx) {
            check_int(idx, "TOPK_IDX input")?;
            check_shape(idx, &[b, k], "TOPK_IDX input")?;
        }
        let out = require(&found_out, "combine", TensorTag::Tokens)?;
        check_dtype(&out, cd, "combine TOKENS output")?;
        check_shape(&out, &[b, hd], "combine TOKENS output")?;

        let mut stats = self.begin_stats(OpName::Combine);
        let before = self.ep.counters();
        match &mut self.engine {
            Engine::Ll(engine) => {
                let l = self.cfg.experts_per_rank();
                check_shape(&expert_out, &[l, self.cfg.ll_expert_capacity(), hd], "LL combine TOKENS input")?;
                engine.combine_send(&self.ep, &h.ll, &expert_out)?;
                stats.add_traffic(&self.ep.counters().since(&before));
                let recv = LlCombineRecv { weights, tokens_out: out };
                if send_only {
                    h.ll.pending_combine = Some(recv);
                    h.pending = Some(stats);
                    h.state = HandleState::CombineStaged;
                    self.staged += 1;
                    return Ok(());
                }
                let before = self.ep.counters();
                stats.slots_used += engine.combine_recv(&self.ep, &mut h.ll, h.id, &h.routing, &recv).await?;
                stats.add_traffic(&self.ep.counters().since(&before));
            }
            Engine::Ht(engine) => {
                let ht = h.ht.as_ref().expect("HT handles carry metadata");
                check_shape(&expert_out, &[ht.recv_total, hd], "HT combine TOKENS input")?;
                let report = engine.combine(&self.ep, ht, &h.routing, &expert_out, &weights, &out).await?;
                stats.add_traffic(&self.ep.counters().since(&before));
                stats.slots_used += report.slots_used;
                stats.inter_node_msgs += report.inter_node_msgs;
                stats.intra_node_msgs += report.intra_node_msgs;
                stats.fifo_stalls += report.fifo_stalls;
                stats.copy_bytes += report.copy_bytes;
            }
        }
        h.state = HandleState::Combined;
        self.finish_stats(stats);
        Ok(())
    }

    /// Runs the deferred receive phase of a staged LL operation.
    pub async fn complete(&mut self, h: &mut EpHandle) -> Result<()> {
        self.check_handle(h)?;
        let Engine::Ll(engine) = &mut self.engine else {
            return Err(EpError::state("complete is only available in LL mode"));
        };
        let before = self.ep.counters();
        match h.state {
            HandleState::DispatchStaged => {
                let outs = h.ll.pending_dispatch.take().expect("staged dispatch outputs");
                let slots = engine.dispatch_recv(&self.ep, &mut h.ll, &outs).await?;
                let mut stats = h.pending.take().expect("staged stats");
                stats.slots_used += slots;
                stats.add_traffic(&self.ep.counters().since(&before));
                h.state = HandleState::Dispatched;
                self.staged -= 1;
                self.finish_stats(stats);
                Ok(())
            }
            HandleState::CombineStaged => {
                let recv = h.ll.pending_combine.take().expect("staged combine buffers");
                let slots = engine.combine_recv(&self.ep, &mut h.ll, h.id, &h.routing, &recv).await?;
                let mut stats = h.pending.take().expect("staged stats");
                stats.slots_used += slots;
                stats.add_traffic(&self.ep.counters().since(&before));
                h.state = HandleState::Combined;
                self.staged -= 1;
                self.finish_stats(stats);
                Ok(())
            }
            s => Err(EpError::state(format!("nothing staged on this handle (state {s:?})"))),
        }
    }
}

/// True for errors a rank reports because a peer failed first.
pub fn is_induced(e: &EpError) -> bool {
    e.code == ErrorCode::TransportClosed && e.detail.starts_with("deadlock")
}
