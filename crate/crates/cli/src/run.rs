//! The `run` workload: repeated full passes over one group, each checked
//! against the oracle, producing stats rows.

use ep_core::config::{Algorithm, EpConfig};
use ep_core::fabric::TraceRecord;
use ep_core::oracle::dedup_inter_node_messages;
use ep_core::world::World;
use ep_core::Result;

use crate::harness::{check_dispatch, combine_error, fabric_options, run_pass, ExpertStub, Scenario, Values, Weights};
use crate::report::StatsRow;

#[derive(Debug, Clone, Copy)]
pub struct RunSpec {
    pub iters: u64,
    pub seed: u64,
    pub stub: ExpertStub,
    pub send_only: bool,
    pub trace: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    /// Per-iteration rows followed by one summary row.
    pub rows: Vec<StatsRow>,
    /// Invariant violations, one message each.
    pub violations: Vec<String>,
    /// (engine, oracle) inter-node message totals of HT dispatches.
    pub ht_inter_node: Option<(u64, u64)>,
    pub max_combine_error: f32,
    pub trace: Vec<TraceRecord>,
}

fn tolerance(cfg: &EpConfig) -> f32 {
    match (cfg.algorithm, cfg.combine_dtype().byte_width()) {
        (Algorithm::Ll, 4) => 1e-6,
        (Algorithm::Ht, 4) => 1e-5,
        // One rounding step of a 16-bit output.
        _ => 2f32.powi(-7),
    }
}

pub fn run_workload(cfg: &EpConfig, spec: RunSpec) -> Result<RunOutput> {
    let mut world = World::create(cfg, fabric_options(Some(spec.seed), spec.trace))?;
    let mut out = RunOutput::default();
    let mut ht = (0u64, 0u64);
    for i in 0..spec.iters {
        let seed = spec.seed.wrapping_add(i);
        let sc = Scenario::generate(cfg, seed, Values::Random, Weights::Random)?;
        let res = run_pass(&mut world, &sc, spec.stub, seed, spec.send_only)?;
        if let Err(m) = check_dispatch(&sc, &res.recv) {
            out.violations.push(format!("iter {i}: {m}"));
        }
        let err = combine_error(&res.combined, &sc.oracle_combine(spec.stub, seed));
        out.max_combine_error = out.max_combine_error.max(err);
        if !(err <= tolerance(cfg)) {
            out.violations.push(format!("iter {i}: combine error {err:e} exceeds {:e}", tolerance(cfg)));
        }
        if cfg.algorithm == Algorithm::Ht {
            let engine: u64 = res
                .stats
                .iter()
                .filter(|s| s.op == ep_core::stats::OpName::Dispatch)
                .map(|s| s.inter_node_msgs)
                .sum();
            let oracle =
                dedup_inter_node_messages(&sc.topk, cfg.top_k, cfg.experts_per_rank(), cfg.ranks_per_node) as u64;
            if engine != oracle {
                out.violations.push(format!("iter {i}: {engine} inter-node messages, dedup oracle {oracle}"));
            }
            ht.0 += engine;
            ht.1 += oracle;
        }
        out.rows.extend(res.stats.iter().map(|s| StatsRow::from_stats(i, s)));
    }
    if cfg.algorithm == Algorithm::Ht {
        out.ht_inter_node = Some(ht);
    }
    out.trace = world.fabric().trace();
    world.destroy()?;
    let summary = StatsRow::summary(spec.iters, &out.rows);
    out.rows.push(summary);
    Ok(out)
}
