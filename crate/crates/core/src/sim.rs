//! Deterministic single-threaded executor for rank programs.
//!
//! Each rank runs as a future. Every scheduling round polls the live ranks
//! (in a seeded random order when the fabric delivers with random delays)
//! and gives the fabric a delivery opportunity after each poll. When a round
//! changes nothing and no operation is in flight, the remaining ranks are
//! deadlocked and fail with `TransportClosed`.

use std::future::Future;
use std::pin::Pin;
use std::task::{Context, Poll, Waker};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EpError, ErrorCode, Result};
use crate::fabric::Fabric;

pub type RankFuture<'a, T> = Pin<Box<dyn Future<Output = Result<T>> + 'a>>;

/// Runs one future per rank to completion and returns each rank's outcome.
pub fn run_ranks<'a, T>(fabric: &Fabric, mut tasks: Vec<RankFuture<'a, T>>) -> Vec<Result<T>> {
    let n = tasks.len();
    let mut results: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = fabric.seed().map(|s| ChaCha8Rng::seed_from_u64(s ^ 0x5eed_0f_5c4e_d01e));
    let mut cx = Context::from_waker(Waker::noop());
    let mut live = n;

    while live > 0 {
        let before = fabric.progress();
        let mut finished = false;
        if let Some(rng) = rng.as_mut() {
            order.shuffle(rng);
        }
        for &i in &order {
            if results[i].is_some() {
                continue;
            }
            if let Poll::Ready(out) = tasks[i].as_mut().poll(&mut cx) {
                results[i] = Some(out);
                live -= 1;
                finished = true;
            }
            fabric.deliver_step();
        }
        if finished || fabric.progress() != before {
            continue;
        }
        if fabric.deliver_forced() {
            continue;
        }
        let blocked: Vec<usize> = (0..n).filter(|&i| results[i].is_none()).collect();
        for &i in &blocked {
            results[i] = Some(Err(EpError::closed(format!("deadlock: ranks {blocked:?} blocked with nothing in flight"))));
        }
        break;
    }
    drop(tasks);

    let faults = fabric.faults();
    results
        .into_iter()
        .map(|r| {
            let r = r.expect("every rank finished");
            match (&r, faults.first()) {
                (Ok(_), Some(f)) => Err(f.clone()),
                _ => r,
            }
        })
        .collect()
}

/// Collapses per-rank outcomes, preferring a root-cause error over the
/// deadlock errors it induces on the other ranks.
pub fn all_ok<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let mut first_err: Option<EpError> = None;
    let mut oks = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(v) => oks.push(v),
            Err(e) => {
                let is_deadlock = e.code == ErrorCode::TransportClosed && e.detail.starts_with("deadlock");
                match &first_err {
                    None => first_err = Some(e),
                    Some(prev) if prev.code == ErrorCode::TransportClosed && prev.detail.starts_with("deadlock") && !is_deadlock => {
                        first_err = Some(e)
                    }
                    _ => {}
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(oks),
    }
}

/// Polls every future on each poll until all complete; results in input order.
/// Unlike waker-driven combinators this makes progress under a no-op waker.
pub async fn join_all<'a, T>(mut futs: Vec<Pin<Box<dyn Future<Output = Result<T>> + 'a>>>) -> Result<Vec<T>> {
    let mut out: Vec<Option<T>> = (0..futs.len()).map(|_| None).collect();
    std::future::poll_fn(|cx| {
        let mut pending = false;
        for (i, f) in futs.iter_mut().enumerate() {
            if out[i].is_some() {
                continue;
            }
            match f.as_mut().poll(cx) {
                Poll::Ready(Ok(v)) => out[i] = Some(v),
                Poll::Ready(Err(e)) => return Poll::Ready(Err(e)),
                Poll::Pending => pending = true,
            }
        }
        if pending {
            Poll::Pending
        } else {
            Poll::Ready(Ok(()))
        }
    })
    .await?;
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// Drives two futures concurrently within one rank.
pub async fn join2<A, B>(a: impl Future<Output = Result<A>>, b: impl Future<Output = Result<B>>) -> Result<(A, B)> {
    let mut a = std::pin::pin!(a);
    let mut b = std::pin::pin!(b);
    let mut ra = None;
    let mut rb = None;
    std::future::poll_fn(|cx| {
        if ra.is_none() {
            match a.as_mut().poll(cx) {
                Poll::Ready(Ok(v)) => ra = Some(v),
                Poll::Ready(Err(e)) => return Poll::Ready(Err(e)),
                Poll::Pending => {}
            }
        }
        if rb.is_none() {
            match b.as_mut().poll(cx) {
                Poll::Ready(Ok(v)) => rb = Some(v),
                Poll::Ready(Err(e)) => return Poll::Ready(Err(e)),
                Poll::Pending => {}
            }
        }
        if ra.is_some() && rb.is_some() {
            Poll::Ready(Ok(()))
        } else {
            Poll::Pending
        }
    })
    .await?;
    Ok((ra.unwrap(), rb.unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{Delivery, FabricOptions, NodeTopology};

    #[test]
    fn detects_deadlock() {
        let f = Fabric::new(NodeTopology::new(2, 1).unwrap(), FabricOptions::default());
        let eps = f.endpoints();
        eps[0].register_signals(1);
        eps[1].register_signals(1);
        let tasks: Vec<RankFuture<'_, ()>> = vec![Box::pin(eps[0].wait_signal(0, 1)), Box::pin(eps[1].wait_signal(0, 1))];
        for r in run_ranks(&f, tasks) {
            let e = r.unwrap_err();
            assert_eq!(e.code, ErrorCode::TransportClosed);
            assert!(e.detail.starts_with("deadlock"));
        }
    }

    #[test]
    fn join2_progresses_both_sides() {
        let f = Fabric::new(NodeTopology::new(1, 1).unwrap(), FabricOptions { delivery: Delivery::Randomized { seed: 3 }, ..Default::default() });
        let ep = f.endpoint(0);
        ep.register_signals(2);
        let task: RankFuture<'_, ()> = Box::pin(async {
            join2(
                async {
                    ep.wait_signal(0, 1).await?;
                    ep.signal_add_local(1, 1)
                },
                async {
                    ep.signal_add_local(0, 1)?;
                    ep.wait_signal(1, 1).await
                },
            )
            .await?;
            Ok(())
        });
        assert!(run_ranks(&f, vec![task])[0].is_ok());
    }
}
