//! Multi-rank workload driver: seeded scenarios, stub experts, full
//! dispatch/combine passes over a [`World`], and oracle comparison.

use std::fmt;

use ep_core::config::{Algorithm, EpConfig, HtCombinePath, LlLayout};
use ep_core::fabric::{Delivery, FabricOptions};
use ep_core::ll::FlushRecord;
use ep_core::oracle::{ref_combine, ref_dispatch, RefDispatch};
use ep_core::quant::{dequantize_block, quantize_block};
use ep_core::stats::OpStats;
use ep_core::world::{RankTensors, World};
use ep_core::{Dtype, EpError, NDTensor, Result, TensorTag};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertStub {
    Identity,
    #[default]
    Scale,
    Affine,
}

impl ExpertStub {
    /// Output of expert `e` for one dequantized input row.
    pub fn apply(self, e: usize, seed: u64, row: &[f32]) -> Vec<f32> {
        match self {
            ExpertStub::Identity => row.to_vec(),
            ExpertStub::Scale => row.iter().map(|&x| x * (e + 1) as f32).collect(),
            ExpertStub::Affine => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (e as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let a: f32 = rng.random_range(0.5..1.5);
                let b: f32 = rng.random_range(-0.25..0.25);
                row.iter().enumerate().map(|(j, &x)| a * x + b * ((j % 7) as f32 - 3.0)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Values {
    /// Uniform in [-1, 1).
    Random,
    /// Multiples of 1/256 in [-8, 8): sums of dyadic fractions stay exact.
    Dyadic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    /// Random positive weights normalized per token.
    Random,
    /// `1/K` for every slot.
    Uniform,
}

/// Routing, inputs and weights of every rank for one pass.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: EpConfig,
    /// `topk[r]`: `K` distinct expert ids per token of rank `r`.
    pub topk: Vec<Vec<u32>>,
    /// Input rows as the engine sees them (already rounded to the dtype).
    pub tokens: Vec<Vec<Vec<f32>>>,
    /// Transmitted bytes per row: (token bytes, scale bytes).
    pub payloads: Vec<Vec<(Vec<u8>, Vec<u8>)>>,
    pub weights: Vec<Vec<f32>>,
}

impl Scenario {
    pub fn generate(cfg: &EpConfig, seed: u64, values: Values, weights: Weights) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, b, k, h, e) = (cfg.num_ranks, cfg.max_tokens_per_rank, cfg.top_k, cfg.hidden, cfg.num_experts);
        let dt = cfg.token_dtype;
        let mut sc = Scenario { cfg: cfg.clone(), topk: vec![], tokens: vec![], payloads: vec![], weights: vec![] };
        for _ in 0..n {
            let mut ids = Vec::with_capacity(b * k);
            let mut rows = Vec::with_capacity(b);
            let mut bytes = Vec::with_capacity(b);
            let mut w = Vec::with_capacity(b * k);
            for _ in 0..b {
                ids.extend(sample(&mut rng, e, k).into_iter().map(|x| x as u32));
                let raw: Vec<f32> = (0..h)
                    .map(|_| match values {
                        Values::Random => rng.random_range(-1.0f32..1.0),
                        Values::Dyadic => rng.random_range(-2048i32..2048) as f32 / 256.0,
                    })
                    .collect();
                let (row, payload) = encode_row(dt, &raw)?;
                rows.push(row);
                bytes.push(payload);
                match weights {
                    Weights::Uniform => w.extend(std::iter::repeat_n(1.0 / k as f32, k)),
                    Weights::Random => {
                        let v: Vec<f32> = (0..k).map(|_| rng.random_range(0.05f32..1.0)).collect();
                        let s: f32 = v.iter().sum();
                        w.extend(v.iter().map(|x| x / s));
                    }
                }
            }
            sc.topk.push(ids);
            sc.tokens.push(rows);
            sc.payloads.push(bytes);
            sc.weights.push(w);
        }
        Ok(sc)
    }

    pub fn rank_tokens(&self, r: usize) -> usize {
        self.tokens[r].len()
    }

    pub fn topk_tensor(&self, r: usize) -> Result<NDTensor> {
        let ids: Vec<i64> = self.topk[r].iter().map(|&e| e as i64).collect();
        NDTensor::from_i64(&[self.rank_tokens(r), self.cfg.top_k], Dtype::I64, TensorTag::TopkIdx, &ids)
    }

    pub fn oracle_dispatch(&self) -> RefDispatch<(Vec<u8>, Vec<u8>)> {
        ref_dispatch(&self.payloads, &self.topk, self.cfg.top_k, self.cfg.num_experts)
    }

    /// Combined output per rank and token as the oracle computes it.
    pub fn oracle_combine(&self, stub: ExpertStub, seed: u64) -> Vec<Vec<Vec<f32>>> {
        let d = self.oracle_dispatch();
        let cd = self.cfg.combine_dtype();
        let outputs: Vec<Vec<Vec<f32>>> = d
            .experts
            .iter()
            .enumerate()
            .map(|(e, entries)| {
                entries
                    .iter()
                    .map(|en| {
                        let x = decode_payload(self.cfg.token_dtype, &en.payload);
                        stub.apply(e, seed, &x).into_iter().map(|v| cd.round_f32(v)).collect()
                    })
                    .collect()
            })
            .collect();
        let mut y = ref_combine(&d, &outputs, &self.topk, &self.weights, self.cfg.top_k, self.cfg.hidden);
        for row in y.iter_mut().flatten().flatten() {
            *row = cd.round_f32(*row);
        }
        y
    }
}

fn encode_row(dt: Dtype, raw: &[f32]) -> Result<(Vec<f32>, (Vec<u8>, Vec<u8>))> {
    if dt == Dtype::FP8 {
        let (codes, scales) = quantize_block(raw)?;
        let row = dequantize_block(&codes, &scales)?;
        let sb = scales.iter().flat_map(|s| s.to_le_bytes()).collect();
        return Ok((row, (codes, sb)));
    }
    let w = dt.byte_width();
    let mut bytes = vec![0u8; raw.len() * w];
    for (x, out) in raw.iter().zip(bytes.chunks_exact_mut(w)) {
        dt.encode_f32(*x, out);
    }
    let row = bytes.chunks_exact(w).map(|c| dt.decode_f32(c)).collect();
    Ok((row, (bytes, Vec::new())))
}

/// Values carried by a transmitted (token, scales) pair.
pub fn decode_payload(dt: Dtype, payload: &(Vec<u8>, Vec<u8>)) -> Vec<f32> {
    if dt == Dtype::FP8 {
        let scales: Vec<f32> = payload.1.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        return dequantize_block(&payload.0, &scales).expect("payload holds whole blocks");
    }
    payload.0.chunks_exact(dt.byte_width()).map(|c| dt.decode_f32(c)).collect()
}

/// One received row with its provenance as recorded by the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct RecvRow {
    pub payload: (Vec<u8>, Vec<u8>),
    pub src_rank: usize,
    pub src_token: usize,
    pub k: Option<usize>,
}

/// Received rows of one rank, grouped by local expert, plus counter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct RankRecv {
    pub experts: Vec<Vec<RecvRow>>,
    pub counters: Vec<i64>,
}

/// One create_handle..destroy_handle cycle driven across all ranks.
#[derive(Debug)]
pub struct Pass {
    pub handle: u64,
    dispatch: Vec<RankTensors>,
    recv: Option<Vec<RankRecv>>,
    combine_out: Vec<NDTensor>,
}

impl Pass {
    pub fn create(world: &mut World, sc: &Scenario) -> Result<Self> {
        let topk: Vec<NDTensor> = (0..world.num_ranks()).map(|r| sc.topk_tensor(r)).collect::<Result<_>>()?;
        let handle = world.create_handle(&topk)?;
        let cfg = world.config().clone();
        let (h, l) = (cfg.hidden, cfg.experts_per_rank());
        let spt = cfg.scales_per_token();
        let ht_rows = match cfg.algorithm {
            Algorithm::Ht => Some(world.num_recv_tokens(handle)?),
            Algorithm::Ll => None,
        };
        let mut dispatch = Vec::new();
        let mut combine_out = Vec::new();
        for (r, topk_t) in topk.into_iter().enumerate() {
            let b = sc.rank_tokens(r);
            let tokens = NDTensor::zeros(&[b, h], cfg.token_dtype, TensorTag::Tokens);
            for (t, p) in sc.payloads[r].iter().enumerate() {
                tokens.write_row_bytes(t, &p.0);
            }
            let mut t = RankTensors { inputs: vec![tokens, topk_t], ..Default::default() };
            if cfg.with_scales {
                let s = NDTensor::zeros(&[b, spt], Dtype::F32, TensorTag::Scales);
                for (i, p) in sc.payloads[r].iter().enumerate() {
                    s.write_row_bytes(i, &p.1);
                }
                t.inputs.push(s);
            }
            match ht_rows.as_ref() {
                None => {
                    let cap = cfg.ll_expert_capacity();
                    t.outputs.push(NDTensor::zeros(&[l, cap, h], cfg.token_dtype, TensorTag::Tokens));
                    if cfg.with_scales {
                        t.outputs.push(NDTensor::zeros(&[l, cap, spt], Dtype::F32, TensorTag::Scales));
                    }
                    t.outputs.push(NDTensor::zeros(&[l], Dtype::I32, TensorTag::RecvExpertCounterDevice));
                }
                Some(rows) => {
                    t.outputs.push(NDTensor::zeros(&[rows[r], h], cfg.token_dtype, TensorTag::Tokens));
                    t.local.push(NDTensor::zeros(&[l], Dtype::I64, TensorTag::TokensPerExperts));
                }
            }
            dispatch.push(t);
            combine_out.push(NDTensor::zeros(&[b, h], cfg.combine_dtype(), TensorTag::Tokens));
        }
        Ok(Self { handle, dispatch, recv: None, combine_out })
    }

    pub fn dispatch(&mut self, world: &mut World, send_only: bool) -> Result<()> {
        world.dispatch(self.handle, &self.dispatch, send_only)
    }

    pub fn complete(&mut self, world: &mut World) -> Result<()> {
        world.complete(self.handle)
    }

    /// Reads every rank's received rows, counters and provenance.
    pub fn collect(&mut self, world: &World) -> &[RankRecv] {
        let cfg = world.config().clone();
        let l = cfg.experts_per_rank();
        let mut all = Vec::new();
        for (r, t) in self.dispatch.iter().enumerate() {
            let handle = world.handle(self.handle, r).expect("live handle");
            let counter = t.outputs.iter().chain(&t.local).find(|x| x.tag() != TensorTag::Tokens && x.tag() != TensorTag::Scales);
            let counters = counter.map(|c| c.to_i64_vec()).unwrap_or_default();
            let out = &t.outputs[0];
            let mut experts = vec![Vec::new(); l];
            match cfg.algorithm {
                Algorithm::Ll => {
                    let cap = cfg.ll_expert_capacity();
                    let scales = t.outputs.iter().find(|x| x.tag() == TensorTag::Scales);
                    let mut cache = handle.ll_state().cache.clone();
                    cache.sort_by_key(|c| (c.expert, c.row));
                    for c in cache {
                        let el = c.expert - r * l;
                        let row = el * cap + c.row;
                        let payload = (out.read_row_bytes(row), scales.map(|s| s.read_row_bytes(row)).unwrap_or_default());
                        experts[el].push(RecvRow { payload, src_rank: c.src_rank, src_token: c.src_token, k: c.k });
                    }
                }
                Algorithm::Ht => {
                    let ht = handle.ht_state().expect("HT handle");
                    let mut row = 0;
                    for (el, rows) in experts.iter_mut().enumerate() {
                        for _ in 0..ht.expert_counts[el] {
                            let [src, tok, k] = ht.row_info[row];
                            rows.push(RecvRow {
                                payload: (out.read_row_bytes(row), Vec::new()),
                                src_rank: src as usize,
                                src_token: tok as usize,
                                k: Some(k as usize),
                            });
                            row += 1;
                        }
                    }
                }
            }
            all.push(RankRecv { experts, counters });
        }
        self.recv = Some(all);
        self.recv.as_deref().unwrap()
    }

    pub fn received(&self) -> Option<&[RankRecv]> {
        self.recv.as_deref()
    }

    /// Runs the stub experts on the received rows and combines the results.
    pub fn combine(
        &mut self,
        world: &mut World,
        sc: &Scenario,
        stub: ExpertStub,
        seed: u64,
        send_only: bool,
    ) -> Result<()> {
        if self.recv.is_none() {
            self.collect(world);
        }
        let cfg = world.config().clone();
        let (h, l, cd) = (cfg.hidden, cfg.experts_per_rank(), cfg.combine_dtype());
        let recv = self.recv.as_ref().unwrap();
        let mut tensors = Vec::new();
        for (r, rr) in recv.iter().enumerate() {
            let expert_out = match cfg.algorithm {
                Algorithm::Ll => NDTensor::zeros(&[l, cfg.ll_expert_capacity(), h], cd, TensorTag::Tokens),
                Algorithm::Ht => {
                    NDTensor::zeros(&[rr.experts.iter().map(Vec::len).sum(), h], cd, TensorTag::Tokens)
                }
            };
            let mut row = 0;
            for (el, rows) in rr.experts.iter().enumerate() {
                let e = r * l + el;
                for (i, rw) in rows.iter().enumerate() {
                    let y = stub.apply(e, seed, &decode_payload(cfg.token_dtype, &rw.payload));
                    let at = match cfg.algorithm {
                        Algorithm::Ll => el * cfg.ll_expert_capacity() + i,
                        Algorithm::Ht => row,
                    };
                    expert_out.write_row_f32(at, &y);
                    row += 1;
                }
            }
            let w = NDTensor::from_f32(
                &[sc.rank_tokens(r), cfg.top_k],
                Dtype::F32,
                TensorTag::TopkWeights,
                &sc.weights[r],
            )?;
            tensors.push(RankTensors {
                inputs: vec![expert_out],
                outputs: vec![self.combine_out[r].clone()],
                local: vec![w],
            });
        }
        world.combine(self.handle, &tensors, send_only)
    }

    /// Combined output rows per rank.
    pub fn combined(&self) -> Vec<Vec<Vec<f32>>> {
        self.combine_out.iter().map(|t| (0..t.rows()).map(|i| t.read_row_f32(i)).collect()).collect()
    }

    pub fn destroy(self, world: &mut World) -> Result<()> {
        world.destroy_handle(self.handle)
    }
}

/// Everything observed in one full pass.
#[derive(Debug, Clone)]
pub struct PassResult {
    pub recv: Vec<RankRecv>,
    pub combined: Vec<Vec<Vec<f32>>>,
    pub stats: Vec<OpStats>,
    pub flushes: Vec<FlushRecord>,
}

/// create_handle, dispatch, experts, combine, destroy; staged ops are
/// completed immediately after being issued.
pub fn run_pass(world: &mut World, sc: &Scenario, stub: ExpertStub, seed: u64, send_only: bool) -> Result<PassResult> {
    let mut p = Pass::create(world, sc)?;
    p.dispatch(world, send_only)?;
    if send_only {
        p.complete(world)?;
    }
    p.collect(world);
    p.combine(world, sc, stub, seed, send_only)?;
    if send_only {
        p.complete(world)?;
    }
    let res = PassResult {
        recv: p.received().unwrap().to_vec(),
        combined: p.combined(),
        stats: world.take_stats(),
        flushes: world.take_flush_log(),
    };
    p.destroy(world)?;
    Ok(res)
}

/// Two handles in the LL pipelined pattern: both dispatches staged, then
/// each completed and combined in turn.
pub fn run_pipelined(world: &mut World, scs: [&Scenario; 2], stub: ExpertStub, seed: u64) -> Result<[PassResult; 2]> {
    let mut p0 = Pass::create(world, scs[0])?;
    let mut p1 = Pass::create(world, scs[1])?;
    p0.dispatch(world, true)?;
    p1.dispatch(world, true)?;
    p0.complete(world)?;
    p0.collect(world);
    p0.combine(world, scs[0], stub, seed, false)?;
    p1.complete(world)?;
    p1.collect(world);
    p1.combine(world, scs[1], stub, seed, false)?;
    let stats = world.take_stats();
    let flushes = world.take_flush_log();
    let r0 = PassResult { recv: p0.received().unwrap().to_vec(), combined: p0.combined(), stats, flushes };
    let r1 = PassResult { recv: p1.received().unwrap().to_vec(), combined: p1.combined(), stats: vec![], flushes: vec![] };
    p0.destroy(world)?;
    p1.destroy(world)?;
    Ok([r0, r1])
}

pub fn fabric_options(delay_seed: Option<u64>, trace: bool) -> FabricOptions {
    FabricOptions {
        delivery: match delay_seed {
            Some(seed) => Delivery::Randomized { seed },
            None => Delivery::Immediate,
        },
        trace,
    }
}

/// Compares received rows and counters with the oracle.
pub fn check_dispatch(sc: &Scenario, recv: &[RankRecv]) -> std::result::Result<(), String> {
    let d = sc.oracle_dispatch();
    let l = sc.cfg.experts_per_rank();
    for (r, rr) in recv.iter().enumerate() {
        for (el, rows) in rr.experts.iter().enumerate() {
            let e = r * l + el;
            let want = d.experts.get(e).map(Vec::as_slice).unwrap_or(&[]);
            if rows.len() != want.len() {
                return Err(format!("rank {r} expert {e}: received {} rows, oracle {}", rows.len(), want.len()));
            }
            if rr.counters.get(el).copied() != Some(want.len() as i64) {
                return Err(format!("rank {r} expert {e}: counter {:?}, oracle {}", rr.counters.get(el), want.len()));
            }
            for (i, (got, w)) in rows.iter().zip(want).enumerate() {
                if (got.src_rank, got.src_token) != (w.src_rank, w.src_token) {
                    return Err(format!(
                        "rank {r} expert {e} row {i}: from ({}, {}), oracle ({}, {})",
                        got.src_rank, got.src_token, w.src_rank, w.src_token
                    ));
                }
                if got.k.is_some_and(|k| k != w.k) {
                    return Err(format!("rank {r} expert {e} row {i}: k {:?}, oracle {}", got.k, w.k));
                }
                if got.payload != w.payload {
                    return Err(format!("rank {r} expert {e} row {i}: payload bytes differ"));
                }
            }
        }
    }
    Ok(())
}

/// Per-row relative error `max|got - want| / max|want|`.
pub fn row_rel_error(got: &[f32], want: &[f32]) -> f32 {
    let scale = want.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let diff = got.iter().zip(want).fold(0.0f32, |m, (g, w)| m.max((g - w).abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f32::MIN_POSITIVE)
    }
}

/// Largest row error of the combined outputs against the oracle.
pub fn combine_error(got: &[Vec<Vec<f32>>], want: &[Vec<Vec<f32>>]) -> f32 {
    got.iter().flatten().zip(want.iter().flatten()).map(|(g, w)| row_rel_error(g, w)).fold(0.0, f32::max)
}

/// One point of the verification grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Case {
    pub algorithm: Algorithm,
    pub ranks: usize,
    pub nodes: usize,
    pub experts: usize,
    pub tokens: usize,
    pub topk: usize,
    pub hidden: usize,
    pub layout: LlLayout,
    pub combine_path: HtCombinePath,
    pub staged: bool,
    pub delay_seed: u64,
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let variant = match self.algorithm {
            Algorithm::Ll => format!("ll {:?}{}", self.layout, if self.staged { " staged" } else { "" }),
            Algorithm::Ht => format!("ht {:?}", self.combine_path),
        };
        write!(
            f,
            "{variant} N={} nodes={} E={} B={} K={} H={} delay_seed={}",
            self.ranks, self.nodes, self.experts, self.tokens, self.topk, self.hidden, self.delay_seed
        )
    }
}

impl Case {
    pub fn config(&self) -> EpConfig {
        EpConfig {
            algorithm: self.algorithm,
            num_ranks: self.ranks,
            ranks_per_node: self.ranks / self.nodes,
            num_experts: self.experts,
            top_k: self.topk,
            hidden: self.hidden,
            max_tokens_per_rank: self.tokens,
            ll_layout: self.layout,
            ht_combine_path: self.combine_path,
            ..Default::default()
        }
    }

    pub fn tolerance(&self) -> f32 {
        match self.algorithm {
            Algorithm::Ll => 1e-6,
            Algorithm::Ht => 1e-5,
        }
    }
}

/// Grid axes for `verify`.
#[derive(Debug, Clone)]
pub struct Grid {
    pub ranks: Vec<usize>,
    pub nodes: Vec<usize>,
    pub experts: Vec<usize>,
    pub tokens: Vec<usize>,
    pub topk: Vec<usize>,
    pub hidden: usize,
    pub layouts: Vec<LlLayout>,
    pub combine_paths: Vec<HtCombinePath>,
    pub algorithms: Vec<Algorithm>,
    pub delay_seeds: Vec<u64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            ranks: vec![1, 2, 4, 8],
            nodes: vec![1, 2],
            experts: vec![8, 16, 32],
            tokens: vec![1, 16, 32],
            topk: vec![1, 2, 8],
            hidden: 32,
            layouts: vec![LlLayout::Optimized, LlLayout::Legacy],
            combine_paths: vec![HtCombinePath::Hierarchical, HtCombinePath::Flat],
            algorithms: vec![Algorithm::Ll, Algorithm::Ht],
            delay_seeds: vec![1, 2, 3],
        }
    }
}

impl Grid {
    /// Valid cases: node count divides the rank count and E >= N.
    pub fn cases(&self) -> Vec<Case> {
        let mut out = Vec::new();
        for &ranks in &self.ranks {
            for &nodes in &self.nodes {
                if nodes > ranks || ranks % nodes != 0 {
                    continue;
                }
                for &experts in &self.experts {
                    if experts < ranks {
                        continue;
                    }
                    for &tokens in &self.tokens {
                        for &topk in &self.topk {
                            if topk > experts {
                                continue;
                            }
                            let base = Case {
                                algorithm: Algorithm::Ll,
                                ranks,
                                nodes,
                                experts,
                                tokens,
                                topk,
                                hidden: self.hidden,
                                layout: LlLayout::Optimized,
                                combine_path: HtCombinePath::Hierarchical,
                                staged: false,
                                delay_seed: 0,
                            };
                            let mut variants = Vec::new();
                            if self.algorithms.contains(&Algorithm::Ll) {
                                for &layout in &self.layouts {
                                    for staged in [false, true] {
                                        variants.push(Case { layout, staged, ..base });
                                    }
                                }
                            }
                            if self.algorithms.contains(&Algorithm::Ht) {
                                for &combine_path in &self.combine_paths {
                                    variants.push(Case { algorithm: Algorithm::Ht, combine_path, ..base });
                                }
                            }
                            for v in variants {
                                for &delay_seed in &self.delay_seeds {
                                    out.push(Case { delay_seed, ..v });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Outcome of one verified case.
#[derive(Debug, Clone, Copy)]
pub struct CaseReport {
    /// Largest row-relative combine error against the oracle.
    pub combine_error: f32,
    /// Identity experts with uniform weights reproduced the inputs bit for bit.
    pub identity_exact: bool,
}

impl CaseReport {
    pub fn passes(&self, case: &Case) -> bool {
        self.combine_error <= case.tolerance() && self.identity_exact
    }

    pub fn describe_failure(&self, case: &Case) -> String {
        if !(self.combine_error <= case.tolerance()) {
            format!("{case}: combine error {:e} exceeds {:e}", self.combine_error, case.tolerance())
        } else {
            format!("{case}: identity round trip is not exact")
        }
    }
}

/// Runs `case` with random data against the oracle, then with dyadic data,
/// uniform weights and identity experts for the exact round trip. Errors
/// are engine failures or dispatch mismatches.
pub fn verify_case(case: &Case) -> std::result::Result<CaseReport, String> {
    let cfg = case.config();
    let seed = case.delay_seed.wrapping_mul(1000) + (case.ranks * 131 + case.experts * 17 + case.tokens * 7 + case.topk) as u64;
    let fail = |what: &str, e: EpError| format!("{case}: {what} failed: {e}");
    let mut world = World::create(&cfg, fabric_options(Some(case.delay_seed), false)).map_err(|e| fail("create_group", e))?;

    let sc = Scenario::generate(&cfg, seed, Values::Random, Weights::Random).map_err(|e| fail("scenario", e))?;
    let res = run_pass(&mut world, &sc, ExpertStub::Affine, seed, case.staged).map_err(|e| fail("pass", e))?;
    check_dispatch(&sc, &res.recv).map_err(|m| format!("{case}: dispatch mismatch: {m}"))?;
    let combine_error = combine_error(&res.combined, &sc.oracle_combine(ExpertStub::Affine, seed));

    let sc = Scenario::generate(&cfg, seed + 1, Values::Dyadic, Weights::Uniform).map_err(|e| fail("scenario", e))?;
    let res = run_pass(&mut world, &sc, ExpertStub::Identity, seed, case.staged).map_err(|e| fail("identity pass", e))?;
    check_dispatch(&sc, &res.recv).map_err(|m| format!("{case}: dispatch mismatch: {m}"))?;
    let identity_exact = res.combined == sc.tokens;
    world.destroy().map_err(|e| fail("destroy_group", e))?;
    Ok(CaseReport { combine_error, identity_exact })
}

/// Summary of a grid sweep; stops at the first counterexample.
#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub cases: usize,
    pub passed: usize,
    pub max_error_ll: f32,
    pub max_error_ht: f32,
    pub identity_exact: usize,
    pub first_failure: Option<String>,
}

pub fn verify_grid(grid: &Grid) -> VerifyReport {
    let mut rep = VerifyReport::default();
    for case in grid.cases() {
        rep.cases += 1;
        match verify_case(&case) {
            Ok(r) if !r.passes(&case) => {
                rep.first_failure = Some(r.describe_failure(&case));
                break;
            }
            Ok(r) => {
                rep.passed += 1;
                rep.identity_exact += r.identity_exact as usize;
                let slot = match case.algorithm {
                    Algorithm::Ll => &mut rep.max_error_ll,
                    Algorithm::Ht => &mut rep.max_error_ht,
                };
                *slot = slot.max(r.combine_error);
            }
            Err(m) => {
                rep.first_failure = Some(m);
                break;
            }
        }
    }
    rep
}
