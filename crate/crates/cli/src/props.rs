//! Randomized protocol checks shared by the test suites.

use std::cell::RefCell;
use std::rc::Rc;

use ep_core::fabric::{Fabric, NodeTopology};
use ep_core::ll::FlushRecord;
use ep_core::layout::tokens_per_expert;
use ep_core::sim::{all_ok, join2, run_ranks, RankFuture};
use ep_core::stats::OpName;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::{fabric_options, Scenario};

/// One randomized interleaving: every rank streams puts and flushing
/// signals to random peers while concurrently checking, on every signal
/// increment it observes, that all puts the signaler issued to it before
/// that signal are visible. Returns the number of signal observations
/// checked, or the first violation.
pub fn flush_ordering_trial(seed: u64) -> std::result::Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=4usize);
    let fabric = Fabric::new(NodeTopology::new(n, n).unwrap(), fabric_options(Some(seed), false));
    let ops = 24;
    // plan[src][dst][j]: puts src issued to dst before its (j+1)-th signal.
    let mut plan = vec![vec![Vec::new(); n]; n];
    let mut scripts = Vec::new();
    for (src, row) in plan.iter_mut().enumerate() {
        let mut puts = vec![0usize; n];
        let mut script = Vec::new();
        for _ in 0..ops {
            let dst = (src + rng.random_range(1..n)) % n;
            if rng.random_bool(0.6) {
                script.push((dst, true, rng.random_range(0..3u32)));
                puts[dst] += 1;
            } else {
                script.push((dst, false, rng.random_range(0..3u32)));
                row[dst].push(puts[dst]);
            }
        }
        scripts.push(script);
    }
    let plan = Rc::new(plan);
    let observed = Rc::new(RefCell::new(0usize));
    let violation: Rc<RefCell<Option<String>>> = Rc::new(RefCell::new(None));

    let eps = fabric.endpoints();
    let windows: Vec<_> = eps.iter().map(|ep| ep.register_window(n * ops * 8).unwrap()).collect();
    let signals: Vec<_> = eps.iter().map(|ep| ep.register_signals(n)).collect();
    let tasks: Vec<RankFuture<'_, ()>> = eps
        .iter()
        .enumerate()
        .map(|(me, ep)| {
            let script = scripts[me].clone();
            let (win, sig) = (windows[me], signals[me]);
            let plan = plan.clone();
            let observed = observed.clone();
            let violation = violation.clone();
            let send = async move {
                let mut next = vec![0usize; n];
                for (dst, is_put, pause) in script {
                    for _ in 0..pause {
                        ep.yield_now().await;
                    }
                    if is_put {
                        let slot = me * ops + next[dst];
                        next[dst] += 1;
                        ep.put(dst, win.window_id, slot * 8, &(next[dst] as u64).to_le_bytes())?;
                    } else {
                        ep.signal_add(dst, sig.id(me), 1)?;
                    }
                }
                Ok(())
            };
            let recv = async move {
                let expected: Vec<usize> = (0..n).map(|src| plan[src][me].len()).collect();
                let mut seen = vec![0usize; n];
                while seen != expected {
                    for src in 0..n {
                        let v = ep.read_signal(sig.id(src)) as usize;
                        while seen[src] < v {
                            let must = plan[src][me][seen[src]];
                            for i in 0..must {
                                let got = ep.read_local(&win, (src * ops + i) * 8, 8)?;
                                if u64::from_le_bytes(got.try_into().unwrap()) != (i + 1) as u64 {
                                    violation.borrow_mut().get_or_insert(format!(
                                        "seed {seed}: rank {me} saw signal {} from {src} before put {i}",
                                        seen[src] + 1
                                    ));
                                }
                            }
                            seen[src] += 1;
                            *observed.borrow_mut() += 1;
                        }
                    }
                    ep.yield_now().await;
                }
                Ok(())
            };
            Box::pin(async move { join2(send, recv).await.map(drop) }) as RankFuture<'_, ()>
        })
        .collect();
    all_ok(run_ranks(&fabric, tasks)).map_err(|e| format!("seed {seed}: {e}"))?;
    if let Some(v) = violation.borrow_mut().take() {
        return Err(v);
    }
    let count = *observed.borrow();
    Ok(count)
}

/// Checks the LL counter flushes of one pass: every (expert, source rank)
/// pair announces `m + 1` on dispatch and `1` on combine, zero-token pairs
/// included. Returns the number of zero-token pairs.
pub fn check_flushes(sc: &Scenario, flushes: &[FlushRecord]) -> std::result::Result<usize, String> {
    let (n, e_total) = (sc.cfg.num_ranks, sc.cfg.num_experts);
    let l = sc.cfg.experts_per_rank();
    let mut zero = 0;
    for op in [OpName::Dispatch, OpName::Combine] {
        let mut seen = vec![vec![None; n]; e_total];
        for f in flushes.iter().filter(|f| f.op == op) {
            if seen[f.expert][f.dp_rank].replace(f.value).is_some() {
                return Err(format!("{op} pair ({}, {}) flushed twice", f.expert, f.dp_rank));
            }
            let target = if op == OpName::Dispatch { f.expert / l } else { f.dp_rank };
            if f.target_rank != target {
                return Err(format!("{op} pair ({}, {}) flushed to rank {}", f.expert, f.dp_rank, f.target_rank));
            }
        }
        for r in 0..n {
            let m = tokens_per_expert(&sc.topk[r], e_total);
            for (e, got) in seen.iter().enumerate() {
                let want = match op {
                    OpName::Dispatch => m[e] as u64 + 1,
                    OpName::Combine => 1,
                };
                if got[r] != Some(want) {
                    return Err(format!("{op} pair ({e}, {r}): flushed {:?}, expected {want}", got[r]));
                }
                if op == OpName::Dispatch && m[e] == 0 {
                    zero += 1;
                }
            }
        }
    }
    Ok(zero)
}
