use std::cell::Cell;
use std::rc::Rc;

use ep_core::api::HandleState;
use ep_core::fabric::{FabricOptions, NodeTopology};
use ep_core::mem::AllocationHooks;
use ep_core::world::{RankTensors, World};
use ep_core::{Algorithm, Dtype, EpConfig, ErrorCode, LlLayout, NDTensor, TensorTag};

fn ll_cfg() -> EpConfig {
    EpConfig { num_ranks: 2, ranks_per_node: 2, num_experts: 4, top_k: 2, hidden: 8, max_tokens_per_rank: 4, ..Default::default() }
}

fn ht_cfg() -> EpConfig {
    EpConfig { algorithm: Algorithm::Ht, num_ranks: 4, ranks_per_node: 2, num_experts: 8, ..ll_cfg() }
}

/// Token t of every rank goes to experts t % E and (t + 1) % E.
fn topk(cfg: &EpConfig, tokens: usize) -> Vec<NDTensor> {
    let ids: Vec<i64> = (0..tokens).flat_map(|t| [t as i64 % cfg.num_experts as i64, (t as i64 + 1) % cfg.num_experts as i64]).collect();
    (0..cfg.num_ranks).map(|_| NDTensor::from_i64(&[tokens, 2], Dtype::I32, TensorTag::TopkIdx, &ids).unwrap()).collect()
}

fn tokens(cfg: &EpConfig, b: usize, r: usize) -> NDTensor {
    let vals: Vec<f32> = (0..b * cfg.hidden).map(|i| (r * 1000 + i) as f32).collect();
    NDTensor::from_f32(&[b, cfg.hidden], cfg.token_dtype, TensorTag::Tokens, &vals).unwrap()
}

fn dispatch_tensors(w: &mut World, h: u64, b: usize) -> Vec<RankTensors> {
    let cfg = w.config().clone();
    let l = cfg.experts_per_rank();
    let rows = match cfg.algorithm {
        Algorithm::Ht => w.num_recv_tokens(h).unwrap(),
        Algorithm::Ll => vec![0; cfg.num_ranks],
    };
    (0..cfg.num_ranks)
        .map(|r| {
            let out = match cfg.algorithm {
                Algorithm::Ll => NDTensor::zeros(&[l, cfg.ll_expert_capacity(), cfg.hidden], cfg.token_dtype, TensorTag::Tokens),
                Algorithm::Ht => NDTensor::zeros(&[rows[r], cfg.hidden], cfg.token_dtype, TensorTag::Tokens),
            };
            RankTensors { inputs: vec![tokens(&cfg, b, r)], outputs: vec![out], local: vec![] }
        })
        .collect()
}

/// Identity experts: feed the dispatch output straight back.
fn combine_tensors(d: &[RankTensors], cfg: &EpConfig, b: usize) -> Vec<RankTensors> {
    d.iter()
        .map(|t| RankTensors {
            inputs: vec![t.outputs[0].clone()],
            outputs: vec![NDTensor::zeros(&[b, cfg.hidden], cfg.combine_dtype(), TensorTag::Tokens)],
            local: vec![NDTensor::from_f32(&[b, 2], Dtype::F32, TensorTag::TopkWeights, &vec![0.5; 2 * b]).unwrap()],
        })
        .collect()
}

fn code<T: std::fmt::Debug>(r: ep_core::Result<T>) -> ErrorCode {
    r.unwrap_err().code
}

#[test]
fn differing_configs_fail_on_every_rank() {
    let topo = NodeTopology::new(2, 2).unwrap();
    let cfgs = vec![ll_cfg(), EpConfig { num_experts: 6, ..ll_cfg() }];
    let (w, errs) = World::create_each(topo, FabricOptions::default(), cfgs, &mut |_| None);
    assert_eq!(w.unwrap_err().code, ErrorCode::ConfigMismatch);
    assert!(errs.iter().all(|e| e.as_ref().unwrap().code == ErrorCode::ConfigMismatch));
}

#[test]
fn invalid_config_on_one_rank() {
    let topo = NodeTopology::new(2, 2).unwrap();
    let cfgs = vec![ll_cfg(), EpConfig { top_k: 9, ..ll_cfg() }];
    let (_, errs) = World::create_each(topo, FabricOptions::default(), cfgs, &mut |_| None);
    assert_eq!(errs[0].as_ref().unwrap().code, ErrorCode::ConfigMismatch);
    assert_eq!(errs[1].as_ref().unwrap().code, ErrorCode::InvalidArgument);
}

#[test]
fn config_must_match_fabric() {
    let topo = NodeTopology::new(2, 1).unwrap();
    let (w, _) = World::create_each(topo, FabricOptions::default(), vec![ll_cfg(); 2], &mut |_| None);
    assert_eq!(w.unwrap_err().code, ErrorCode::InvalidArgument);
}

struct Budget {
    left: usize,
    live: Rc<Cell<i64>>,
}

impl AllocationHooks for Budget {
    fn allocate(&mut self, bytes: usize, align: usize) -> Option<Vec<u8>> {
        assert!(align.is_power_of_two());
        if bytes > self.left {
            return None;
        }
        self.left -= bytes;
        self.live.set(self.live.get() + 1);
        Some(vec![0; bytes])
    }

    fn release(&mut self, buffer: Vec<u8>) {
        self.left += buffer.len();
        self.live.set(self.live.get() - 1);
    }
}

#[test]
fn refused_allocation_fails_every_rank_and_releases() {
    let topo = NodeTopology::new(2, 2).unwrap();
    let live = Rc::new(Cell::new(0));
    let mut hooks = |r: usize| -> Option<Box<dyn AllocationHooks>> {
        Some(Box::new(Budget { left: if r == 1 { 100 } else { usize::MAX }, live: live.clone() }))
    };
    let (w, errs) = World::create_each(topo, FabricOptions::default(), vec![ll_cfg(); 2], &mut hooks);
    assert_eq!(w.unwrap_err().code, ErrorCode::CapacityExceeded);
    assert!(errs.iter().all(|e| e.as_ref().unwrap().code == ErrorCode::CapacityExceeded));
    assert_eq!(live.get(), 0);
}

#[test]
fn hooks_back_every_buffer() {
    let topo = NodeTopology::new(2, 2).unwrap();
    let live = Rc::new(Cell::new(0));
    let mut hooks =
        |_| -> Option<Box<dyn AllocationHooks>> { Some(Box::new(Budget { left: usize::MAX, live: live.clone() })) };
    let (w, _) = World::create_each(topo, FabricOptions::default(), vec![ll_cfg(); 2], &mut hooks);
    let mut w = w.unwrap();
    let rep = w.group(0).allocation_report().clone();
    assert_eq!(rep.internal_allocations, 0);
    assert_eq!(rep.hook_allocations, rep.entries.len());
    assert_eq!(live.get(), 2 * rep.entries.len() as i64);
    w.destroy().unwrap();
    assert_eq!(live.get(), 0);
    assert_eq!(w.fabric().registered_bytes(0), 0);
}

#[test]
fn create_handle_validation() {
    let cfg = ll_cfg();
    let mut w = World::create(&cfg, FabricOptions::default()).unwrap();
    let good = topk(&cfg, 2);
    let retag: Vec<_> = good.iter().map(|t| t.with_tag(TensorTag::Tokens)).collect();
    assert_eq!(code(w.create_handle(&retag)), ErrorCode::TagMismatch);
    let float: Vec<_> =
        (0..2).map(|_| NDTensor::from_f32(&[1, 2], Dtype::F32, TensorTag::TopkIdx, &[0.0, 1.0]).unwrap()).collect();
    assert_eq!(code(w.create_handle(&float)), ErrorCode::TagMismatch);
    let ids = |v: &[i64]| -> Vec<NDTensor> {
        (0..2).map(|_| NDTensor::from_i64(&[v.len() / 2, 2], Dtype::I64, TensorTag::TopkIdx, v).unwrap()).collect()
    };
    assert_eq!(code(w.create_handle(&ids(&[0, 4]))), ErrorCode::InvalidArgument);
    assert_eq!(code(w.create_handle(&ids(&[1, 1]))), ErrorCode::InvalidArgument);
    assert_eq!(code(w.create_handle(&ids(&[0, -1]))), ErrorCode::InvalidArgument);
    assert_eq!(code(w.create_handle(&ids(&[0; 10]))), ErrorCode::InvalidArgument);
    w.create_handle(&good).unwrap();
}

#[test]
fn dispatch_tag_and_shape_checks() {
    let cfg = ll_cfg();
    let mut w = World::create(&cfg, FabricOptions::default()).unwrap();
    let h = w.create_handle(&topk(&cfg, 3)).unwrap();
    let base = dispatch_tensors(&mut w, h, 3);
    let edit = |f: &dyn Fn(&mut RankTensors)| -> Vec<RankTensors> {
        base.iter().cloned().map(|mut t| {
            f(&mut t);
            t
        }).collect()
    };

    let missing = edit(&|t| t.inputs.clear());
    assert_eq!(code(w.dispatch(h, &missing, false)), ErrorCode::TagMismatch);
    let dup = edit(&|t| t.inputs.push(t.inputs[0].clone()));
    assert_eq!(code(w.dispatch(h, &dup, false)), ErrorCode::TagMismatch);
    let stray = edit(&|t| t.inputs.push(NDTensor::zeros(&[3, 2], Dtype::F32, TensorTag::TopkWeights)));
    assert_eq!(code(w.dispatch(h, &stray, false)), ErrorCode::TagMismatch);
    let dtype = edit(&|t| t.inputs[0] = NDTensor::zeros(&[3, 8], Dtype::BF16, TensorTag::Tokens));
    assert_eq!(code(w.dispatch(h, &dtype, false)), ErrorCode::TagMismatch);
    let shape = edit(&|t| t.inputs[0] = NDTensor::zeros(&[2, 8], Dtype::F32, TensorTag::Tokens));
    assert_eq!(code(w.dispatch(h, &shape, false)), ErrorCode::ShapeMismatch);
    let out_shape = edit(&|t| t.outputs[0] = NDTensor::zeros(&[2, 7, 8], Dtype::F32, TensorTag::Tokens));
    assert_eq!(code(w.dispatch(h, &out_shape, false)), ErrorCode::ShapeMismatch);
    let counter_twice = edit(&|t| {
        t.outputs.push(NDTensor::zeros(&[2], Dtype::I32, TensorTag::RecvExpertCounterHost));
        t.local.push(NDTensor::zeros(&[2], Dtype::I32, TensorTag::RecvExpertCounterHost));
    });
    assert_eq!(code(w.dispatch(h, &counter_twice, false)), ErrorCode::TagMismatch);
    assert_eq!(w.handle(h, 0).unwrap().state(), HandleState::Created);

    let with_none = edit(&|t| t.inputs.push(NDTensor::zeros(&[1], Dtype::F32, TensorTag::None)));
    w.dispatch(h, &with_none, false).unwrap();
    assert_eq!(w.handle(h, 1).unwrap().state(), HandleState::Dispatched);
}

#[test]
fn fp8_requires_scales() {
    let cfg = EpConfig { token_dtype: Dtype::FP8, with_scales: true, hidden: 128, ..ll_cfg() };
    let mut w = World::create(&cfg, FabricOptions::default()).unwrap();
    let h = w.create_handle(&topk(&cfg, 1)).unwrap();
    let t = dispatch_tensors(&mut w, h, 1);
    let t: Vec<_> = t
        .into_iter()
        .map(|mut x| {
            x.outputs.push(NDTensor::zeros(&[2, 8, 1], Dtype::F32, TensorTag::Scales));
            x
        })
        .collect();
    assert_eq!(code(w.dispatch(h, &t, false)), ErrorCode::TagMismatch);
}

#[test]
fn state_machine() {
    let cfg = ll_cfg();
    let mut w = World::create(&cfg, FabricOptions::default()).unwrap();
    let h = w.create_handle(&topk(&cfg, 2)).unwrap();
    let d = dispatch_tensors(&mut w, h, 2);
    let c = combine_tensors(&d, &cfg, 2);

    assert_eq!(code(w.num_recv_tokens(h)), ErrorCode::HandleStateError);
    assert_eq!(code(w.combine(h, &c, false)), ErrorCode::HandleStateError);
    assert_eq!(code(w.complete(h)), ErrorCode::HandleStateError);

    w.dispatch(h, &d, true).unwrap();
    assert_eq!(w.handle(h, 0).unwrap().state(), HandleState::DispatchStaged);
    assert_eq!(code(w.destroy_handle(h)), ErrorCode::HandleStateError);
    assert_eq!(code(w.destroy()), ErrorCode::HandleStateError);
    assert_eq!(code(w.dispatch(h, &d, false)), ErrorCode::HandleStateError);
    w.complete(h).unwrap();
    assert_eq!(w.num_recv_tokens(h).unwrap(), vec![6, 2]);
    assert_eq!(code(w.dispatch(h, &d, false)), ErrorCode::HandleStateError);

    w.combine(h, &c, true).unwrap();
    assert_eq!(w.handle(h, 1).unwrap().state(), HandleState::CombineStaged);
    w.complete(h).unwrap();
    assert_eq!(w.handle(h, 1).unwrap().state(), HandleState::Combined);
    let first: Vec<Vec<f32>> = c.iter().map(|t| t.outputs[0].to_f32_vec()).collect();
    for (r, out) in first.iter().enumerate() {
        assert_eq!(*out, tokens(&cfg, 2, r).to_f32_vec());
    }

    // Backward pass reuses the handle.
    w.dispatch(h, &d, false).unwrap();
    w.combine(h, &c, false).unwrap();
    let second: Vec<Vec<f32>> = c.iter().map(|t| t.outputs[0].to_f32_vec()).collect();
    assert_eq!(first, second);

    w.destroy_handle(h).unwrap();
    assert_eq!(code(w.num_recv_tokens(h)), ErrorCode::InvalidArgument);
    w.destroy().unwrap();
    assert_eq!(code(w.destroy()), ErrorCode::HandleStateError);
}

#[test]
fn handles_are_bound_to_their_group() {
    let cfg = ll_cfg();
    let mut a = World::create(&cfg, FabricOptions::default()).unwrap();
    let mut b = World::create(&cfg, FabricOptions::default()).unwrap();
    let h = a.create_handle(&topk(&cfg, 1)).unwrap();
    let handle = a.handle(h, 0).unwrap();
    assert_eq!(b.group(0).get_num_recv_tokens(handle).unwrap_err().code, ErrorCode::InvalidArgument);
    let _ = b.destroy();
}

#[test]
fn third_live_dispatch_is_rejected_until_a_combine() {
    let cfg = ll_cfg();
    let mut w = World::create(&cfg, FabricOptions::default()).unwrap();
    let hs: Vec<u64> = (0..3).map(|_| w.create_handle(&topk(&cfg, 1)).unwrap()).collect();
    let d = dispatch_tensors(&mut w, hs[0], 1);
    w.dispatch(hs[0], &d, false).unwrap();
    w.dispatch(hs[1], &d, false).unwrap();
    assert_eq!(code(w.dispatch(hs[2], &d, false)), ErrorCode::HandleStateError);
    w.combine(hs[0], &combine_tensors(&d, &cfg, 1), false).unwrap();
    let d2 = dispatch_tensors(&mut w, hs[2], 1);
    w.dispatch(hs[2], &d2, false).unwrap();
}

#[test]
fn abandoned_handle_frees_its_buffers() {
    for layout in [LlLayout::Optimized, LlLayout::Legacy] {
        let cfg = EpConfig { ll_layout: layout, ..ll_cfg() };
        let mut w = World::create(&cfg, FabricOptions::default()).unwrap();
        for _ in 0..4 {
            let h = w.create_handle(&topk(&cfg, 2)).unwrap();
            let d = dispatch_tensors(&mut w, h, 2);
            w.dispatch(h, &d, false).unwrap();
            w.destroy_handle(h).unwrap();
        }
        let h = w.create_handle(&topk(&cfg, 3)).unwrap();
        let d = dispatch_tensors(&mut w, h, 3);
        w.dispatch(h, &d, false).unwrap();
        let c = combine_tensors(&d, &cfg, 3);
        w.combine(h, &c, false).unwrap();
        assert_eq!(c[1].outputs[0].to_f32_vec(), tokens(&cfg, 3, 1).to_f32_vec());
    }
}

#[test]
fn ht_rejects_staging_and_reports_counts_early() {
    let cfg = ht_cfg();
    let mut w = World::create(&cfg, FabricOptions::default()).unwrap();
    let h = w.create_handle(&topk(&cfg, 4)).unwrap();
    let rows = w.num_recv_tokens(h).unwrap();
    assert_eq!(rows.iter().sum::<usize>(), 4 * 4 * 2);
    let d = dispatch_tensors(&mut w, h, 4);
    assert_eq!(code(w.dispatch(h, &d, true)), ErrorCode::HandleStateError);
    assert_eq!(code(w.complete(h)), ErrorCode::HandleStateError);
    let wrong: Vec<RankTensors> = d
        .iter()
        .cloned()
        .map(|mut t| {
            t.outputs[0] = NDTensor::zeros(&[t.outputs[0].shape()[0] + 1, 8], Dtype::F32, TensorTag::Tokens);
            t
        })
        .collect();
    assert_eq!(code(w.dispatch(h, &wrong, false)), ErrorCode::ShapeMismatch);
    w.dispatch(h, &d, false).unwrap();
    let c = combine_tensors(&d, &cfg, 4);
    assert_eq!(code(w.combine(h, &c, true)), ErrorCode::HandleStateError);
    w.combine(h, &c, false).unwrap();
    for (r, t) in c.iter().enumerate() {
        assert_eq!(t.outputs[0].to_f32_vec(), tokens(&cfg, 4, r).to_f32_vec());
    }
    let stats = w.take_stats();
    assert_eq!(stats.len(), 2 * cfg.num_ranks);
    assert!(stats.iter().any(|s| s.inter_node_msgs > 0));
}

#[test]
fn stats_cover_staged_operations() {
    let cfg = ll_cfg();
    let mut w = World::create(&cfg, FabricOptions::default()).unwrap();
    let h = w.create_handle(&topk(&cfg, 2)).unwrap();
    let d = dispatch_tensors(&mut w, h, 2);
    w.dispatch(h, &d, true).unwrap();
    assert!(w.take_stats().is_empty());
    w.complete(h).unwrap();
    let s = w.take_stats();
    assert_eq!(s.len(), 2);
    // One optimized slot per (source, token) even when it feeds two local experts.
    assert_eq!(s.iter().map(|x| x.slots_used).collect::<Vec<_>>(), vec![4, 2]);
    assert!(s.iter().all(|x| x.signals > 0 && x.buffer_bytes > 0));
}
