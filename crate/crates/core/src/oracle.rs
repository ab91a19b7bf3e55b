//! Brute-force reference for dispatch and combine. Works by direct
//! enumeration over every rank's routing and shares no code with the
//! engines.

use std::collections::HashMap;

/// One routed copy of a token as seen by its expert.
#[derive(Debug, Clone, PartialEq)]
pub struct RefEntry<T> {
    pub src_rank: usize,
    pub src_token: usize,
    pub k: usize,
    pub payload: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefDispatch<T> {
    /// Per expert, entries ordered by (source rank, token index).
    pub experts: Vec<Vec<RefEntry<T>>>,
}

impl<T> RefDispatch<T> {
    pub fn counts(&self) -> Vec<usize> {
        self.experts.iter().map(Vec::len).collect()
    }

    /// Entries received by `rank`, concatenated over its experts in order.
    pub fn rank_rows(&self, rank: usize, experts_per_rank: usize) -> impl Iterator<Item = &RefEntry<T>> {
        let lo = (rank * experts_per_rank).min(self.experts.len());
        let hi = ((rank + 1) * experts_per_rank).min(self.experts.len());
        self.experts[lo..hi].iter().flatten()
    }
}

/// `rows[r][t]` is token `t` of rank `r`; `topk[r]` holds `top_k` expert
/// ids per token.
pub fn ref_dispatch<T: Clone>(rows: &[Vec<T>], topk: &[Vec<u32>], top_k: usize, num_experts: usize) -> RefDispatch<T> {
    let mut experts = vec![Vec::new(); num_experts];
    for (r, (tokens, ids)) in rows.iter().zip(topk).enumerate() {
        for (t, choice) in ids.chunks_exact(top_k).enumerate() {
            for (k, &e) in choice.iter().enumerate() {
                experts[e as usize].push(RefEntry { src_rank: r, src_token: t, k, payload: tokens[t].clone() });
            }
        }
    }
    RefDispatch { experts }
}

/// `outputs[e][i]` is the expert's result for `dispatch.experts[e][i]`.
/// Returns per rank and token `sum_k w[t,k] * out(R_k(t), t)`, summed in
/// ascending `k`.
pub fn ref_combine<T>(
    dispatch: &RefDispatch<T>,
    outputs: &[Vec<Vec<f32>>],
    topk: &[Vec<u32>],
    weights: &[Vec<f32>],
    top_k: usize,
    hidden: usize,
) -> Vec<Vec<Vec<f32>>> {
    let mut at = HashMap::new();
    for (e, entries) in dispatch.experts.iter().enumerate() {
        for (i, en) in entries.iter().enumerate() {
            at.insert((e, en.src_rank, en.src_token), &outputs[e][i]);
        }
    }
    topk.iter()
        .enumerate()
        .map(|(r, ids)| {
            ids.chunks_exact(top_k)
                .enumerate()
                .map(|(t, choice)| {
                    let mut acc = vec![0f32; hidden];
                    for (k, &e) in choice.iter().enumerate() {
                        let w = weights[r][t * top_k + k];
                        let row = at[&(e as usize, r, t)];
                        for (a, &x) in acc.iter_mut().zip(row) {
                            *a += w * x;
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Inter-node transfers under the (token, destination node) dedup rule.
pub fn dedup_inter_node_messages(topk: &[Vec<u32>], top_k: usize, experts_per_rank: usize, ranks_per_node: usize) -> usize {
    let mut total = 0;
    for (r, ids) in topk.iter().enumerate() {
        let home = r / ranks_per_node;
        for choice in ids.chunks_exact(top_k) {
            let mut nodes: Vec<usize> =
                choice.iter().map(|&e| e as usize / experts_per_rank / ranks_per_node).filter(|&n| n != home).collect();
            nodes.sort_unstable();
            nodes.dedup();
            total += nodes.len();
        }
    }
    total
}

/// Largest element-wise relative error, with `floor` guarding tiny magnitudes.
pub fn max_rel_error(got: &[f32], want: &[f32], floor: f32) -> f32 {
    got.iter().zip(want).map(|(&g, &w)| (g - w).abs() / w.abs().max(floor)).fold(0.0, f32::max)
}
