//! Simulated multi-rank transport.
//!
//! Every rank owns registered byte windows and an array of 64-bit signal
//! counters. Remote operations (`put`, `signal_add`) are queued on a per
//! (source, destination) channel and applied later by the delivery step, in
//! issue order for that pair. Because a signal sits behind every put the same
//! endpoint issued earlier to the same destination, observing the increment
//! implies observing the bytes. Delivery across different sources is
//! unordered and, in randomized mode, delayed by a seeded RNG.
//!
//! Same-node peers can also be reached with synchronous load/store (`lsa_*`).

use std::collections::{BTreeMap, VecDeque};
use std::future::poll_fn;
use std::io::{self, Write};
use std::sync::{Arc, Mutex, MutexGuard};
use std::task::Poll;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeTopology {
    num_ranks: usize,
    ranks_per_node: usize,
}

impl NodeTopology {
    pub fn new(num_ranks: usize, ranks_per_node: usize) -> Result<Self> {
        if num_ranks == 0 || ranks_per_node == 0 || num_ranks % ranks_per_node != 0 {
            return Err(EpError::invalid(format!(
                "ranks_per_node {ranks_per_node} must divide num_ranks {num_ranks}"
            )));
        }
        Ok(Self { num_ranks, ranks_per_node })
    }

    pub fn num_ranks(&self) -> usize {
        self.num_ranks
    }

    pub fn ranks_per_node(&self) -> usize {
        self.ranks_per_node
    }

    pub fn num_nodes(&self) -> usize {
        self.num_ranks / self.ranks_per_node
    }

    pub fn node_of(&self, rank: usize) -> usize {
        rank / self.ranks_per_node
    }

    pub fn rail_of(&self, rank: usize) -> usize {
        rank % self.ranks_per_node
    }

    pub fn rank_at(&self, node: usize, rail: usize) -> usize {
        node * self.ranks_per_node + rail
    }

    pub fn same_node(&self, a: usize, b: usize) -> bool {
        self.node_of(a) == self.node_of(b)
    }

    pub fn node_ranks(&self, node: usize) -> std::ops::Range<usize> {
        node * self.ranks_per_node..(node + 1) * self.ranks_per_node
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub owner_rank: usize,
    pub byte_size: usize,
    pub window_id: u32,
}

/// Contiguous block of signal ids, identical on every rank that registered
/// it in the same order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalRange {
    pub base: usize,
    pub len: usize,
}

impl SignalRange {
    pub fn id(&self, i: usize) -> usize {
        assert!(i < self.len, "signal {i} outside range of {}", self.len);
        self.base + i
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Delivery {
    /// Queued operations are applied as soon as the issuing rank yields.
    #[default]
    Immediate,
    /// Seeded random delays between independent sources.
    Randomized { seed: u64 },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FabricOptions {
    pub delivery: Delivery,
    pub trace: bool,
}

/// Traffic issued by one rank.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrafficCounters {
    pub puts: u64,
    pub put_bytes: u64,
    pub signal_adds: u64,
    pub lsa_stores: u64,
    pub lsa_store_bytes: u64,
    pub lsa_loads: u64,
    pub lsa_load_bytes: u64,
    pub lsa_signals: u64,
}

impl TrafficCounters {
    pub fn since(&self, earlier: &TrafficCounters) -> TrafficCounters {
        TrafficCounters {
            puts: self.puts - earlier.puts,
            put_bytes: self.put_bytes - earlier.put_bytes,
            signal_adds: self.signal_adds - earlier.signal_adds,
            lsa_stores: self.lsa_stores - earlier.lsa_stores,
            lsa_store_bytes: self.lsa_store_bytes - earlier.lsa_store_bytes,
            lsa_loads: self.lsa_loads - earlier.lsa_loads,
            lsa_load_bytes: self.lsa_load_bytes - earlier.lsa_load_bytes,
            lsa_signals: self.lsa_signals - earlier.lsa_signals,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOp {
    Put,
    Signal,
    LsaStore,
    LsaSignal,
}

impl TraceOp {
    fn as_str(self) -> &'static str {
        match self {
            TraceOp::Put => "put",
            TraceOp::Signal => "signal",
            TraceOp::LsaStore => "lsa_store",
            TraceOp::LsaSignal => "lsa_signal",
        }
    }
}

/// One delivered operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub op: TraceOp,
    pub src: usize,
    pub dst: usize,
    pub window: Option<u32>,
    pub offset: usize,
    pub len: usize,
    pub signal_id: Option<usize>,
    pub value: u64,
    /// Issue sequence number on the (src, dst) channel.
    pub seq: u64,
}

impl TraceRecord {
    pub const CSV_HEADER: &'static str = "op,src,dst,window,offset,len,signal_id,value,seq";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.op.as_str(),
            self.src,
            self.dst,
            opt(self.window.map(|w| w.to_string())),
            self.offset,
            self.len,
            opt(self.signal_id.map(|s| s.to_string())),
            self.value,
            self.seq
        )
    }
}

pub fn write_trace(records: &[TraceRecord], out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "{}", TraceRecord::CSV_HEADER)?;
    for r in records {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

enum OpKind {
    Put { window: u32, offset: usize, data: Vec<u8> },
    Signal { id: usize, value: u64 },
}

struct InFlight {
    kind: OpKind,
    seq: u64,
}

#[derive(Default)]
struct RankState {
    windows: BTreeMap<u32, Vec<u8>>,
    next_window: u32,
    signals: Vec<u64>,
    counters: TrafficCounters,
    bootstrap_round: u64,
}

struct BootstrapRound {
    posted: Vec<Option<Vec<u8>>>,
    readers: usize,
}

struct FabricState {
    topology: NodeTopology,
    ranks: Vec<RankState>,
    channels: Vec<VecDeque<InFlight>>,
    issue_seq: Vec<u64>,
    in_flight: usize,
    closed: bool,
    progress: u64,
    trace: Option<Vec<TraceRecord>>,
    rng: Option<ChaCha8Rng>,
    bootstrap: BTreeMap<u64, BootstrapRound>,
    faults: Vec<EpError>,
}

impl FabricState {
    fn channel(&self, src: usize, dst: usize) -> usize {
        src * self.topology.num_ranks + dst
    }

    fn check_window(&self, dst: usize, window: u32, offset: usize, len: usize) -> Result<()> {
        let bytes = self.ranks[dst]
            .windows
            .get(&window)
            .ok_or_else(|| EpError::invalid(format!("window {window} not registered on rank {dst}")))?;
        if offset.checked_add(len).is_none_or(|end| end > bytes.len()) || (len > 0 && offset >= bytes.len()) {
            return Err(EpError::capacity(format!(
                "access [{offset}, {offset}+{len}) outside window {window} of {} bytes on rank {dst}",
                bytes.len()
            )));
        }
        Ok(())
    }

    fn check_signal(&self, dst: usize, id: usize) -> Result<()> {
        if id >= self.ranks[dst].signals.len() {
            return Err(EpError::invalid(format!("signal {id} not registered on rank {dst}")));
        }
        Ok(())
    }

    fn record(&mut self, rec: TraceRecord) {
        if let Some(t) = self.trace.as_mut() {
            t.push(rec);
        }
    }

    fn deliver_front(&mut self, ch: usize) {
        let n = self.topology.num_ranks;
        let (src, dst) = (ch / n, ch % n);
        let Some(op) = self.channels[ch].pop_front() else { return };
        self.in_flight -= 1;
        self.progress += 1;
        match op.kind {
            OpKind::Put { window, offset, data } => {
                if let Err(e) = self.check_window(dst, window, offset, data.len()) {
                    self.faults.push(e);
                    return;
                }
                let len = data.len();
                if len > 0 {
                    let bytes = self.ranks[dst].windows.get_mut(&window).unwrap();
                    bytes[offset..offset + len].copy_from_slice(&data);
                }
                self.record(TraceRecord {
                    op: TraceOp::Put,
                    src,
                    dst,
                    window: Some(window),
                    offset,
                    len,
                    signal_id: None,
                    value: 0,
                    seq: op.seq,
                });
            }
            OpKind::Signal { id, value } => {
                self.ranks[dst].signals[id] += value;
                self.record(TraceRecord {
                    op: TraceOp::Signal,
                    src,
                    dst,
                    window: None,
                    offset: 0,
                    len: 0,
                    signal_id: Some(id),
                    value,
                    seq: op.seq,
                });
            }
        }
    }

    fn deliver_all(&mut self) {
        for ch in 0..self.channels.len() {
            while !self.channels[ch].is_empty() {
                self.deliver_front(ch);
            }
        }
    }

    /// One delivery opportunity: every non-empty channel independently
    /// delivers a random prefix of its queue, or nothing.
    fn deliver_step(&mut self) {
        let Some(mut rng) = self.rng.take() else {
            self.deliver_all();
            return;
        };
        for ch in 0..self.channels.len() {
            let len = self.channels[ch].len();
            if len == 0 || rng.random_bool(0.5) {
                continue;
            }
            let count = rng.random_range(1..=len);
            for _ in 0..count {
                self.deliver_front(ch);
            }
        }
        self.rng = Some(rng);
    }

    /// Delivers the front of one randomly chosen non-empty channel.
    fn deliver_forced(&mut self) -> bool {
        let busy: Vec<usize> = (0..self.channels.len()).filter(|&c| !self.channels[c].is_empty()).collect();
        if busy.is_empty() {
            return false;
        }
        let pick = match self.rng.as_mut() {
            Some(rng) => busy[rng.random_range(0..busy.len())],
            None => busy[0],
        };
        self.deliver_front(pick);
        true
    }
}

/// Shared fabric state; cheap to clone.
#[derive(Clone)]
pub struct Fabric {
    state: Arc<Mutex<FabricState>>,
    topology: NodeTopology,
    seed: Option<u64>,
}

impl Fabric {
    pub fn new(topology: NodeTopology, options: FabricOptions) -> Self {
        let n = topology.num_ranks();
        let (rng, seed) = match options.delivery {
            Delivery::Immediate => (None, None),
            Delivery::Randomized { seed } => (Some(ChaCha8Rng::seed_from_u64(seed)), Some(seed)),
        };
        let state = FabricState {
            topology,
            ranks: (0..n).map(|_| RankState::default()).collect(),
            channels: (0..n * n).map(|_| VecDeque::new()).collect(),
            issue_seq: vec![0; n * n],
            in_flight: 0,
            closed: false,
            progress: 0,
            trace: options.trace.then(Vec::new),
            rng,
            bootstrap: BTreeMap::new(),
            faults: Vec::new(),
        };
        Self { state: Arc::new(Mutex::new(state)), topology, seed }
    }

    pub fn topology(&self) -> NodeTopology {
        self.topology
    }

    /// Seed of randomized delivery, if enabled.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn endpoint(&self, rank: usize) -> Endpoint {
        assert!(rank < self.topology.num_ranks(), "rank {rank} out of range");
        Endpoint { rank, fabric: self.clone() }
    }

    pub fn endpoints(&self) -> Vec<Endpoint> {
        (0..self.topology.num_ranks()).map(|r| self.endpoint(r)).collect()
    }

    /// Closes the fabric; pending and future waits fail with `TransportClosed`.
    pub fn shutdown(&self) {
        let mut st = self.lock();
        st.closed = true;
        st.progress += 1;
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    pub fn trace(&self) -> Vec<TraceRecord> {
        self.lock().trace.clone().unwrap_or_default()
    }

    pub fn clear_trace(&self) {
        if let Some(t) = self.lock().trace.as_mut() {
            t.clear();
        }
    }

    pub fn faults(&self) -> Vec<EpError> {
        self.lock().faults.clone()
    }

    pub fn in_flight(&self) -> usize {
        self.lock().in_flight
    }

    pub fn counters(&self, rank: usize) -> TrafficCounters {
        self.lock().ranks[rank].counters
    }

    pub fn signal_value(&self, rank: usize, id: usize) -> u64 {
        self.lock().ranks[rank].signals[id]
    }

    /// Total registered window bytes on `rank`.
    pub fn registered_bytes(&self, rank: usize) -> usize {
        self.lock().ranks[rank].windows.values().map(Vec::len).sum()
    }

    pub(crate) fn progress(&self) -> u64 {
        self.lock().progress
    }

    pub(crate) fn note_progress(&self) {
        self.lock().progress += 1;
    }

    pub(crate) fn deliver_step(&self) {
        self.lock().deliver_step();
    }

    pub(crate) fn deliver_forced(&self) -> bool {
        self.lock().deliver_forced()
    }

    fn lock(&self) -> MutexGuard<'_, FabricState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// A rank's handle on the fabric.
pub struct Endpoint {
    rank: usize,
    fabric: Fabric,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint").field("rank", &self.rank).finish()
    }
}

impl Endpoint {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn topology(&self) -> NodeTopology {
        self.fabric.topology
    }

    pub fn num_ranks(&self) -> usize {
        self.fabric.topology.num_ranks()
    }

    pub fn counters(&self) -> TrafficCounters {
        self.fabric.counters(self.rank)
    }

    fn lock(&self) -> MutexGuard<'_, FabricState> {
        self.fabric.lock()
    }

    fn check_peer(&self, peer: usize) -> Result<()> {
        if peer >= self.num_ranks() {
            return Err(EpError::invalid(format!("peer {peer} out of range")));
        }
        Ok(())
    }

    pub fn register_window(&self, byte_size: usize) -> Result<Window> {
        self.register_window_with(vec![0; byte_size])
    }

    /// Registers caller-provided memory as a window.
    pub fn register_window_with(&self, memory: Vec<u8>) -> Result<Window> {
        if memory.is_empty() {
            return Err(EpError::invalid("window size must be > 0"));
        }
        let mut st = self.lock();
        let rs = &mut st.ranks[self.rank];
        let id = rs.next_window;
        rs.next_window += 1;
        let byte_size = memory.len();
        rs.windows.insert(id, memory);
        st.progress += 1;
        Ok(Window { owner_rank: self.rank, byte_size, window_id: id })
    }

    /// Removes a window and hands its memory back.
    pub fn deregister_window(&self, window: &Window) -> Result<Vec<u8>> {
        if window.owner_rank != self.rank {
            return Err(EpError::invalid("only the owner may deregister a window"));
        }
        self.lock().ranks[self.rank]
            .windows
            .remove(&window.window_id)
            .ok_or_else(|| EpError::invalid(format!("window {} not registered", window.window_id)))
    }

    pub fn register_signals(&self, count: usize) -> SignalRange {
        let mut st = self.lock();
        let signals = &mut st.ranks[self.rank].signals;
        let base = signals.len();
        signals.resize(base + count, 0);
        SignalRange { base, len: count }
    }

    /// One-sided write into `dst`'s window; becomes visible no later than the
    /// next signal this endpoint sends to `dst`.
    pub fn put(&self, dst: usize, window: u32, offset: usize, payload: &[u8]) -> Result<()> {
        self.check_peer(dst)?;
        let mut st = self.lock();
        if st.closed {
            return Err(EpError::closed("fabric shut down"));
        }
        st.check_window(dst, window, offset, payload.len())?;
        let ch = st.channel(self.rank, dst);
        let seq = st.issue_seq[ch];
        st.issue_seq[ch] += 1;
        st.channels[ch].push_back(InFlight {
            kind: OpKind::Put { window, offset, data: payload.to_vec() },
            seq,
        });
        st.in_flight += 1;
        st.progress += 1;
        let c = &mut st.ranks[self.rank].counters;
        c.puts += 1;
        c.put_bytes += payload.len() as u64;
        Ok(())
    }

    /// Atomic increment of a remote counter, ordered after all earlier puts
    /// from this endpoint to `dst`.
    pub fn signal_add(&self, dst: usize, signal_id: usize, value: u64) -> Result<()> {
        self.check_peer(dst)?;
        let mut st = self.lock();
        if st.closed {
            return Err(EpError::closed("fabric shut down"));
        }
        st.check_signal(dst, signal_id)?;
        let ch = st.channel(self.rank, dst);
        let seq = st.issue_seq[ch];
        st.issue_seq[ch] += 1;
        st.channels[ch].push_back(InFlight { kind: OpKind::Signal { id: signal_id, value }, seq });
        st.in_flight += 1;
        st.progress += 1;
        st.ranks[self.rank].counters.signal_adds += 1;
        Ok(())
    }

    pub fn read_signal(&self, signal_id: usize) -> u64 {
        self.lock().ranks[self.rank].signals[signal_id]
    }

    /// Zeroes local counters. Only valid at quiescent points.
    pub fn reset_signals(&self, range: SignalRange) {
        let mut st = self.lock();
        st.ranks[self.rank].signals[range.base..range.base + range.len].fill(0);
    }

    /// Resolves once the local counter reaches `threshold`.
    pub async fn wait_signal(&self, signal_id: usize, threshold: u64) -> Result<()> {
        poll_fn(|_| {
            let st = self.lock();
            if st.closed {
                return Poll::Ready(Err(EpError::closed(format!(
                    "fabric shut down while rank {} waited on signal {signal_id}",
                    self.rank
                ))));
            }
            match st.ranks[self.rank].signals.get(signal_id) {
                None => Poll::Ready(Err(EpError::invalid(format!("signal {signal_id} not registered")))),
                Some(&v) if v >= threshold => Poll::Ready(Ok(())),
                Some(_) => Poll::Pending,
            }
        })
        .await
    }

    /// True if the counter is already at `threshold`; never blocks.
    pub fn test_signal(&self, signal_id: usize, threshold: u64) -> bool {
        self.read_signal(signal_id) >= threshold
    }

    /// Reads from this rank's own window.
    pub fn read_local(&self, window: &Window, offset: usize, len: usize) -> Result<Vec<u8>> {
        let st = self.lock();
        st.check_window(self.rank, window.window_id, offset, len)?;
        Ok(st.ranks[self.rank].windows[&window.window_id][offset..offset + len].to_vec())
    }

    /// Runs `f` over a slice of this rank's own window.
    pub fn with_local<R>(&self, window: &Window, offset: usize, len: usize, f: impl FnOnce(&[u8]) -> R) -> Result<R> {
        let st = self.lock();
        st.check_window(self.rank, window.window_id, offset, len)?;
        Ok(f(&st.ranks[self.rank].windows[&window.window_id][offset..offset + len]))
    }

    pub fn write_local(&self, window: &Window, offset: usize, bytes: &[u8]) -> Result<()> {
        let mut st = self.lock();
        st.check_window(self.rank, window.window_id, offset, bytes.len())?;
        st.ranks[self.rank].windows.get_mut(&window.window_id).unwrap()[offset..offset + bytes.len()]
            .copy_from_slice(bytes);
        st.progress += 1;
        Ok(())
    }

    /// Adds to one of this rank's own counters (local completion).
    pub fn signal_add_local(&self, signal_id: usize, value: u64) -> Result<()> {
        let mut st = self.lock();
        st.check_signal(self.rank, signal_id)?;
        st.ranks[self.rank].signals[signal_id] += value;
        st.progress += 1;
        Ok(())
    }

    /// Whether `peer` is reachable with direct load/store (same node).
    pub fn lsa_accessible(&self, peer: usize) -> bool {
        peer < self.num_ranks() && self.topology().same_node(self.rank, peer)
    }

    fn check_lsa(&self, peer: usize) -> Result<()> {
        self.check_peer(peer)?;
        if !self.lsa_accessible(peer) {
            return Err(EpError::invalid(format!(
                "rank {peer} is not load/store accessible from rank {}",
                self.rank
            )));
        }
        if self.lock().closed {
            return Err(EpError::closed("fabric shut down"));
        }
        Ok(())
    }

    fn next_lsa_seq(st: &mut FabricState, src: usize, dst: usize) -> u64 {
        let ch = st.channel(src, dst);
        let seq = st.issue_seq[ch];
        st.issue_seq[ch] += 1;
        seq
    }

    /// Synchronous store into a same-node peer's window.
    pub fn lsa_store(&self, peer: usize, window: u32, offset: usize, bytes: &[u8]) -> Result<()> {
        self.check_lsa(peer)?;
        let mut st = self.lock();
        st.check_window(peer, window, offset, bytes.len())?;
        st.ranks[peer].windows.get_mut(&window).unwrap()[offset..offset + bytes.len()].copy_from_slice(bytes);
        st.progress += 1;
        let seq = Self::next_lsa_seq(&mut st, self.rank, peer);
        st.record(TraceRecord {
            op: TraceOp::LsaStore,
            src: self.rank,
            dst: peer,
            window: Some(window),
            offset,
            len: bytes.len(),
            signal_id: None,
            value: 0,
            seq,
        });
        let c = &mut st.ranks[self.rank].counters;
        c.lsa_stores += 1;
        c.lsa_store_bytes += bytes.len() as u64;
        Ok(())
    }

    pub fn lsa_load(&self, peer: usize, window: u32, offset: usize, len: usize) -> Result<Vec<u8>> {
        self.check_lsa(peer)?;
        let mut st = self.lock();
        st.check_window(peer, window, offset, len)?;
        let out = st.ranks[peer].windows[&window][offset..offset + len].to_vec();
        let c = &mut st.ranks[self.rank].counters;
        c.lsa_loads += 1;
        c.lsa_load_bytes += len as u64;
        Ok(out)
    }

    /// Store-release of a 64-bit coordination word; every earlier store to
    /// `peer` is visible to a reader that load-acquires this word.
    pub fn lsa_store_release(&self, peer: usize, window: u32, offset: usize, value: u64) -> Result<()> {
        self.lsa_store(peer, window, offset, &value.to_le_bytes())
    }

    pub fn lsa_load_acquire(&self, peer: usize, window: u32, offset: usize) -> Result<u64> {
        let bytes = self.lsa_load(peer, window, offset, 8)?;
        Ok(u64::from_le_bytes(bytes.try_into().unwrap()))
    }

    /// Release-ordered add to a same-node peer's counter.
    pub fn lsa_signal_add(&self, peer: usize, signal_id: usize, value: u64) -> Result<()> {
        self.check_lsa(peer)?;
        let mut st = self.lock();
        st.check_signal(peer, signal_id)?;
        st.ranks[peer].signals[signal_id] += value;
        st.progress += 1;
        let seq = Self::next_lsa_seq(&mut st, self.rank, peer);
        st.record(TraceRecord {
            op: TraceOp::LsaSignal,
            src: self.rank,
            dst: peer,
            window: None,
            offset: 0,
            len: 0,
            signal_id: Some(signal_id),
            value,
            seq,
        });
        st.ranks[self.rank].counters.lsa_signals += 1;
        Ok(())
    }

    /// Yields once to the scheduler.
    pub async fn yield_now(&self) {
        let mut yielded = false;
        poll_fn(|_| {
            if yielded {
                Poll::Ready(())
            } else {
                yielded = true;
                self.fabric.note_progress();
                Poll::Pending
            }
        })
        .await
    }

    /// Out-of-band all-gather used for bootstrapping collective setup.
    /// Every rank must call it the same number of times.
    pub async fn bootstrap_allgather(&self, payload: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        let n = self.num_ranks();
        let round = {
            let mut st = self.lock();
            if st.closed {
                return Err(EpError::closed("fabric shut down"));
            }
            let round = st.ranks[self.rank].bootstrap_round;
            st.ranks[self.rank].bootstrap_round += 1;
            let entry = st
                .bootstrap
                .entry(round)
                .or_insert_with(|| BootstrapRound { posted: vec![None; n], readers: 0 });
            entry.posted[self.rank] = Some(payload);
            st.progress += 1;
            round
        };
        poll_fn(|_| {
            let mut st = self.lock();
            if st.closed {
                return Poll::Ready(Err(EpError::closed("fabric shut down during bootstrap")));
            }
            let entry = st.bootstrap.get_mut(&round).expect("bootstrap round");
            if entry.posted.iter().any(Option::is_none) {
                return Poll::Pending;
            }
            let all: Vec<Vec<u8>> = entry.posted.iter().map(|p| p.clone().unwrap()).collect();
            entry.readers += 1;
            if entry.readers == n {
                st.bootstrap.remove(&round);
            }
            st.progress += 1;
            Poll::Ready(Ok(all))
        })
        .await
    }
}

/// All-rank barrier over a monotone signal counter. Counters are never reset,
/// so a rank one epoch ahead cannot release a slower rank early.
#[derive(Debug)]
pub struct SignalBarrier {
    signal: usize,
    epoch: u64,
}

impl SignalBarrier {
    pub fn new(ep: &Endpoint) -> Self {
        Self { signal: ep.register_signals(1).base, epoch: 0 }
    }

    pub async fn arrive(&mut self, ep: &Endpoint) -> Result<()> {
        self.epoch += 1;
        for peer in 0..ep.num_ranks() {
            if peer == ep.rank() {
                ep.signal_add_local(self.signal, 1)?;
            } else {
                ep.signal_add(peer, self.signal, 1)?;
            }
        }
        ep.wait_signal(self.signal, self.epoch * ep.num_ranks() as u64).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorCode;
    use crate::sim::{run_ranks, RankFuture};

    fn fabric(n: usize, rpn: usize) -> Fabric {
        Fabric::new(NodeTopology::new(n, rpn).unwrap(), FabricOptions { trace: true, ..Default::default() })
    }

    #[test]
    fn topology_relations() {
        let t = NodeTopology::new(8, 4).unwrap();
        assert_eq!(t.node_of(5), 1);
        assert_eq!(t.rail_of(5), 1);
        assert!(t.same_node(4, 7));
        assert!(!t.same_node(3, 4));
        assert!(t.same_node(3, 3));
        assert_eq!(t.rank_at(1, 2), 6);
        assert!(NodeTopology::new(6, 4).is_err());
    }

    #[test]
    fn register_windows() {
        let f = fabric(2, 2);
        let ep = f.endpoint(0);
        let w = ep.register_window(1 << 20).unwrap();
        assert_eq!((w.owner_rank, w.byte_size), (0, 1 << 20));
        let w2 = ep.register_window(16).unwrap();
        assert_ne!(w.window_id, w2.window_id);
        assert_eq!(ep.register_window(0).unwrap_err().code, ErrorCode::InvalidArgument);
    }

    #[test]
    fn put_bounds() {
        let f = fabric(2, 1);
        let w = f.endpoint(1).register_window(64).unwrap();
        let ep = f.endpoint(0);
        assert_eq!(ep.put(1, w.window_id, 64, &[1]).unwrap_err().code, ErrorCode::CapacityExceeded);
        assert_eq!(ep.put(1, w.window_id, 60, &[0; 8]).unwrap_err().code, ErrorCode::CapacityExceeded);
        ep.put(1, w.window_id, 56, &[7; 8]).unwrap();
        ep.put(1, w.window_id, 64, &[]).unwrap();
    }

    #[test]
    fn put_then_signal_makes_bytes_visible() {
        let f = fabric(2, 1);
        let eps = f.endpoints();
        let w = eps[1].register_window(64).unwrap();
        eps[0].register_signals(4);
        eps[1].register_signals(4);
        let tasks: Vec<RankFuture<'_, Vec<u8>>> = vec![
            Box::pin(async {
                eps[0].put(1, w.window_id, 8, &[0xab; 16])?;
                eps[0].signal_add(1, 3, 6)?;
                Ok(vec![])
            }),
            Box::pin(async {
                eps[1].wait_signal(3, 6).await?;
                assert_eq!(eps[1].read_signal(3), 6);
                eps[1].read_local(&w, 8, 16)
            }),
        ];
        let out = run_ranks(&f, tasks);
        assert_eq!(out[1].as_ref().unwrap(), &vec![0xab; 16]);
    }

    #[test]
    fn signal_additivity() {
        let f = fabric(3, 1);
        let eps = f.endpoints();
        for ep in &eps {
            ep.register_signals(1);
        }
        eps[1].signal_add(0, 0, 1).unwrap();
        eps[2].signal_add(0, 0, 1).unwrap();
        f.lock().deliver_all();
        assert_eq!(eps[0].read_signal(0), 2);
    }

    #[test]
    fn wait_threshold_zero_is_immediate() {
        let f = fabric(1, 1);
        let ep = f.endpoint(0);
        ep.register_signals(1);
        let out = run_ranks(&f, vec![Box::pin(ep.wait_signal(0, 0)) as RankFuture<'_, ()>]);
        assert!(out[0].is_ok());
    }

    #[test]
    fn shutdown_during_wait() {
        let f = fabric(2, 1);
        let eps = f.endpoints();
        eps[0].register_signals(1);
        let f2 = f.clone();
        let ep1 = &eps[1];
        let tasks: Vec<RankFuture<'_, ()>> = vec![
            Box::pin(eps[0].wait_signal(0, 1)),
            Box::pin(async move {
                ep1.yield_now().await;
                f2.shutdown();
                Ok(())
            }),
        ];
        let out = run_ranks(&f, tasks);
        assert_eq!(out[0].as_ref().unwrap_err().code, ErrorCode::TransportClosed);
        assert!(out[1].is_ok());
    }

    #[test]
    fn lsa_accessibility_and_release_acquire() {
        let f = fabric(4, 2);
        let eps = f.endpoints();
        assert!(eps[0].lsa_accessible(1));
        assert!(!eps[0].lsa_accessible(2));
        let w = eps[1].register_window(64).unwrap();
        assert_eq!(eps[0].lsa_store(2, w.window_id, 0, &[1]).unwrap_err().code, ErrorCode::InvalidArgument);
        eps[0].lsa_store(1, w.window_id, 8, &[5; 8]).unwrap();
        eps[0].lsa_store_release(1, w.window_id, 0, 1).unwrap();
        assert_eq!(eps[1].lsa_load_acquire(1, w.window_id, 0).unwrap(), 1);
        assert_eq!(eps[1].read_local(&w, 8, 8).unwrap(), vec![5; 8]);
    }

    #[test]
    fn trace_csv_format() {
        let f = fabric(2, 1);
        let eps = f.endpoints();
        let w = eps[1].register_window(32).unwrap();
        eps[1].register_signals(2);
        eps[0].put(1, w.window_id, 4, &[1, 2]).unwrap();
        eps[0].signal_add(1, 1, 3).unwrap();
        f.lock().deliver_all();
        let lines: Vec<String> = f.trace().iter().map(TraceRecord::to_csv).collect();
        assert_eq!(lines, vec!["put,0,1,0,4,2,,0,0", "signal,0,1,,0,0,1,3,1"]);
    }

    #[test]
    fn bootstrap_allgather_collects_all() {
        let f = fabric(3, 1);
        let eps = f.endpoints();
        let tasks: Vec<RankFuture<'_, Vec<Vec<u8>>>> =
            eps.iter().map(|ep| Box::pin(ep.bootstrap_allgather(vec![ep.rank() as u8])) as RankFuture<'_, _>).collect();
        for r in run_ranks(&f, tasks) {
            assert_eq!(r.unwrap(), vec![vec![0], vec![1], vec![2]]);
        }
    }
}
