//! All ranks of one simulated job driven in lockstep. Every method issues
//! the same call on every rank and runs the rank programs to completion.

use std::collections::BTreeMap;

use crate::api::{EpGroup, EpHandle};
use crate::config::EpConfig;
use crate::error::{EpError, Result};
use crate::fabric::{Fabric, FabricOptions, NodeTopology};
use crate::ll::FlushRecord;
use crate::mem::AllocationHooks;
use crate::sim::{all_ok, run_ranks, RankFuture};
use crate::stats::OpStats;
use crate::tensor::NDTensor;

pub type HooksFactory<'a> = dyn FnMut(usize) -> Option<Box<dyn AllocationHooks>> + 'a;

/// Per-rank tensor lists of one dispatch or combine call.
#[derive(Debug, Clone, Default)]
pub struct RankTensors {
    pub inputs: Vec<NDTensor>,
    pub outputs: Vec<NDTensor>,
    pub local: Vec<NDTensor>,
}

pub struct World {
    fabric: Fabric,
    groups: Vec<EpGroup>,
    handles: BTreeMap<u64, Vec<EpHandle>>,
    next_handle: u64,
    last_errors: Vec<Option<EpError>>,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World").field("ranks", &self.groups.len()).field("handles", &self.handles.len()).finish()
    }
}

fn record<T>(results: Vec<Result<T>>, errors: &mut Vec<Option<EpError>>) -> Result<Vec<T>> {
    *errors = results.iter().map(|r| r.as_ref().err().cloned()).collect();
    all_ok(results)
}

impl World {
    /// Builds a fabric for `cfg` and creates the group on every rank.
    pub fn create(cfg: &EpConfig, options: FabricOptions) -> Result<Self> {
        cfg.validate()?;
        let topo = NodeTopology::new(cfg.num_ranks, cfg.ranks_per_node)?;
        Self::create_each(topo, options, vec![cfg.clone(); cfg.num_ranks], &mut |_| None).0
    }

    /// Creates the group with a possibly different config and allocator per
    /// rank. Also returns each rank's own outcome.
    pub fn create_each(
        topology: NodeTopology,
        options: FabricOptions,
        configs: Vec<EpConfig>,
        hooks: &mut HooksFactory<'_>,
    ) -> (Result<Self>, Vec<Option<EpError>>) {
        let fabric = Fabric::new(topology, options);
        let tasks: Vec<RankFuture<'_, EpGroup>> = configs
            .into_iter()
            .enumerate()
            .map(|(r, cfg)| {
                let ep = fabric.endpoint(r);
                let hk = hooks(r);
                Box::pin(EpGroup::create(ep, cfg, hk)) as RankFuture<'_, EpGroup>
            })
            .collect();
        let mut errors = Vec::new();
        let groups = match record(run_ranks(&fabric, tasks), &mut errors) {
            Ok(g) => g,
            Err(e) => return (Err(e), errors),
        };
        let world = Self { fabric, groups, handles: BTreeMap::new(), next_handle: 0, last_errors: errors.clone() };
        (Ok(world), errors)
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn num_ranks(&self) -> usize {
        self.groups.len()
    }

    pub fn config(&self) -> &EpConfig {
        self.groups[0].config()
    }

    pub fn group(&self, rank: usize) -> &EpGroup {
        &self.groups[rank]
    }

    pub fn group_mut(&mut self, rank: usize) -> &mut EpGroup {
        &mut self.groups[rank]
    }

    pub fn handle(&self, h: u64, rank: usize) -> Option<&EpHandle> {
        self.handles.get(&h).map(|v| &v[rank])
    }

    /// Each rank's error from the most recent collective step.
    pub fn last_errors(&self) -> &[Option<EpError>] {
        &self.last_errors
    }

    fn handles_of(&mut self, h: u64) -> Result<&mut Vec<EpHandle>> {
        self.handles.get_mut(&h).ok_or_else(|| EpError::invalid(format!("unknown handle {h}")))
    }

    pub fn create_handle(&mut self, topk: &[NDTensor]) -> Result<u64> {
        let tasks: Vec<RankFuture<'_, EpHandle>> = self
            .groups
            .iter_mut()
            .zip(topk)
            .map(|(g, t)| Box::pin(g.create_handle(t)) as RankFuture<'_, EpHandle>)
            .collect();
        let hs = record(run_ranks(&self.fabric, tasks), &mut self.last_errors)?;
        let id = self.next_handle;
        self.next_handle += 1;
        self.handles.insert(id, hs);
        Ok(id)
    }

    pub fn dispatch(&mut self, h: u64, tensors: &[RankTensors], send_only: bool) -> Result<()> {
        let mut hs = self.handles.remove(&h).ok_or_else(|| EpError::invalid(format!("unknown handle {h}")))?;
        let tasks: Vec<RankFuture<'_, ()>> = self
            .groups
            .iter_mut()
            .zip(hs.iter_mut())
            .zip(tensors)
            .map(|((g, hd), t)| {
                Box::pin(g.dispatch(hd, &t.inputs, &t.outputs, &t.local, send_only)) as RankFuture<'_, ()>
            })
            .collect();
        let out = record(run_ranks(&self.fabric, tasks), &mut self.last_errors);
        self.handles.insert(h, hs);
        out.map(drop)
    }

    pub fn combine(&mut self, h: u64, tensors: &[RankTensors], send_only: bool) -> Result<()> {
        let mut hs = self.handles.remove(&h).ok_or_else(|| EpError::invalid(format!("unknown handle {h}")))?;
        let tasks: Vec<RankFuture<'_, ()>> = self
            .groups
            .iter_mut()
            .zip(hs.iter_mut())
            .zip(tensors)
            .map(|((g, hd), t)| {
                Box::pin(g.combine(hd, &t.inputs, &t.outputs, &t.local, send_only)) as RankFuture<'_, ()>
            })
            .collect();
        let out = record(run_ranks(&self.fabric, tasks), &mut self.last_errors);
        self.handles.insert(h, hs);
        out.map(drop)
    }

    pub fn complete(&mut self, h: u64) -> Result<()> {
        let mut hs = self.handles.remove(&h).ok_or_else(|| EpError::invalid(format!("unknown handle {h}")))?;
        let tasks: Vec<RankFuture<'_, ()>> =
            self.groups.iter_mut().zip(hs.iter_mut()).map(|(g, hd)| Box::pin(g.complete(hd)) as RankFuture<'_, ()>).collect();
        let out = record(run_ranks(&self.fabric, tasks), &mut self.last_errors);
        self.handles.insert(h, hs);
        out.map(drop)
    }

    pub fn num_recv_tokens(&mut self, h: u64) -> Result<Vec<usize>> {
        let groups = &self.groups;
        let hs = self.handles.get(&h).ok_or_else(|| EpError::invalid(format!("unknown handle {h}")))?;
        let results: Vec<Result<usize>> = groups.iter().zip(hs).map(|(g, hd)| g.get_num_recv_tokens(hd)).collect();
        record(results, &mut self.last_errors)
    }

    /// Destroys the handle on every rank; it is forgotten once all succeed.
    pub fn destroy_handle(&mut self, h: u64) -> Result<()> {
        let hs = self.handles_of(h)?;
        let mut results = Vec::with_capacity(hs.len());
        let mut hs = std::mem::take(hs);
        for (g, hd) in self.groups.iter_mut().zip(hs.iter_mut()) {
            results.push(g.destroy_handle(hd));
        }
        let out = record(results, &mut self.last_errors);
        if out.is_err() {
            self.handles.insert(h, hs);
        } else {
            self.handles.remove(&h);
        }
        out.map(drop)
    }

    pub fn destroy(&mut self) -> Result<()> {
        let results: Vec<Result<()>> = self.groups.iter_mut().map(EpGroup::destroy).collect();
        record(results, &mut self.last_errors).map(drop)
    }

    /// Statistics of every rank, rank-major, since the last call.
    pub fn take_stats(&mut self) -> Vec<OpStats> {
        self.groups.iter_mut().flat_map(EpGroup::take_stats).collect()
    }

    pub fn take_flush_log(&mut self) -> Vec<FlushRecord> {
        self.groups.iter_mut().flat_map(EpGroup::take_flush_log).collect()
    }
}
