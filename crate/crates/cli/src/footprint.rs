//! Legacy versus optimized LL receive-buffer footprint.

use ep_core::config::{Algorithm, EpConfig, LlLayout};
use ep_core::fabric::{FabricOptions, NodeTopology};
use ep_core::layout::{memory_reduction_ratio, MoeShape};
use ep_core::ll::LlBufferPlan;
use ep_core::world::World;
use ep_core::{Dtype, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootprintReport {
    pub legacy_bytes: u64,
    pub optimized_bytes: u64,
    /// `2E / (N + K)`.
    pub formula_ratio: f64,
    pub measured_ratio: f64,
}

pub fn ll_config(experts: usize, ranks: usize, topk: usize, hidden: usize, tokens: usize, dtype: Dtype, layout: LlLayout) -> EpConfig {
    EpConfig {
        algorithm: Algorithm::Ll,
        num_ranks: ranks,
        ranks_per_node: ranks,
        num_experts: experts,
        top_k: topk,
        hidden,
        max_tokens_per_rank: tokens,
        token_dtype: dtype,
        with_scales: dtype == Dtype::FP8,
        ll_layout: layout,
        ..Default::default()
    }
}

/// Receive bytes of one buffer parity per rank, from the buffer plan the
/// group allocates.
pub fn footprint(experts: usize, ranks: usize, topk: usize, hidden: usize, tokens: usize, dtype: Dtype) -> Result<FootprintReport> {
    MoeShape::new(experts, ranks, tokens, topk, hidden)?;
    let plan = |layout| {
        let cfg = ll_config(experts, ranks, topk, hidden, tokens, dtype, layout);
        cfg.validate().map(|()| LlBufferPlan::new(&cfg).receive_bytes() as u64)
    };
    let legacy = plan(LlLayout::Legacy)?;
    let optimized = plan(LlLayout::Optimized)?;
    Ok(FootprintReport {
        legacy_bytes: legacy,
        optimized_bytes: optimized,
        formula_ratio: memory_reduction_ratio(experts, ranks, topk),
        measured_ratio: legacy as f64 / optimized as f64,
    })
}

/// Receive bytes one rank registers when the group is actually created.
pub fn allocated_receive_bytes(cfg: &EpConfig) -> Result<u64> {
    let topo = NodeTopology::new(cfg.num_ranks, cfg.ranks_per_node)?;
    let (world, _) = World::create_each(topo, FabricOptions::default(), vec![cfg.clone(); cfg.num_ranks], &mut |_| None);
    let mut world = world?;
    let report = world.group(0).allocation_report().clone();
    world.destroy()?;
    Ok((report.bytes_with_prefix("ll.p0.dispatch_recv") + report.bytes_with_prefix("ll.p0.combine_recv")) as u64)
}
