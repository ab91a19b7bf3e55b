use serde::{Deserialize, Serialize};

use crate::error::{EpError, Result};
use crate::quant::QUANT_BLOCK;
use crate::tensor::Dtype;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Low-latency: full mesh, 3D expert-major output, staged execution.
    Ll,
    /// High-throughput: hierarchical NVLink + RDMA, 2D output.
    Ht,
}

/// Receive-buffer organisation of the low-latency engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlLayout {
    /// One sub-region per (expert, rank) pair, B slots each.
    Legacy,
    /// Dispatch sub-region per source rank, combine slots packed by (token, k).
    #[default]
    Optimized,
}

/// Combine data path of the high-throughput engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HtCombinePath {
    /// Partial sums per node, one inter-node transfer per (token, node).
    #[default]
    Hierarchical,
    /// Every expert row sent individually to its source rank.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct EpConfig {
    pub algorithm: Algorithm,
    pub num_ranks: usize,
    pub ranks_per_node: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub max_tokens_per_rank: usize,
    pub token_dtype: Dtype,
    pub with_scales: bool,
    pub ht_chunk_tokens: usize,
    pub ht_fifo_depth: usize,
    pub ll_layout: LlLayout,
    pub ht_combine_path: HtCombinePath,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ll,
            num_ranks: 1,
            ranks_per_node: 1,
            num_experts: 1,
            top_k: 1,
            hidden: 128,
            max_tokens_per_rank: 1,
            token_dtype: Dtype::F32,
            with_scales: false,
            ht_chunk_tokens: 4,
            ht_fifo_depth: 8,
            ll_layout: LlLayout::Optimized,
            ht_combine_path: HtCombinePath::Hierarchical,
        }
    }
}

impl EpConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(EpError::invalid(msg));
        if self.num_ranks == 0 {
            return fail("num_ranks must be >= 1".into());
        }
        if self.ranks_per_node == 0 || self.num_ranks % self.ranks_per_node != 0 {
            return fail(format!(
                "ranks_per_node {} must divide num_ranks {}",
                self.ranks_per_node, self.num_ranks
            ));
        }
        if self.num_experts < self.num_ranks {
            return fail(format!("num_experts {} < num_ranks {}", self.num_experts, self.num_ranks));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return fail(format!("top_k {} outside [1, {}]", self.top_k, self.num_experts));
        }
        if self.hidden == 0 || self.max_tokens_per_rank == 0 {
            return fail("hidden and max_tokens_per_rank must be >= 1".into());
        }
        if !self.token_dtype.is_float() {
            return fail(format!("token dtype {} is not a float type", self.token_dtype));
        }
        if self.with_scales != (self.token_dtype == Dtype::FP8) {
            return fail("scales are required exactly when tokens are fp8".into());
        }
        if self.with_scales && self.hidden % QUANT_BLOCK != 0 {
            return fail(format!("hidden {} not divisible by {QUANT_BLOCK}", self.hidden));
        }
        if self.algorithm == Algorithm::Ht {
            if self.token_dtype == Dtype::FP8 {
                return fail("fp8 tokens are only supported in LL mode".into());
            }
            if self.ht_chunk_tokens == 0 || self.ht_fifo_depth == 0 {
                return fail("ht_chunk_tokens and ht_fifo_depth must be >= 1".into());
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_ranks / self.ranks_per_node
    }

    /// Experts hosted per rank, `ceil(E / N)`.
    pub fn experts_per_rank(&self) -> usize {
        self.num_experts.div_ceil(self.num_ranks)
    }

    /// Dtype of expert outputs and combined tokens; fp8 dispatch combines in bf16.
    pub fn combine_dtype(&self) -> Dtype {
        match self.token_dtype {
            Dtype::FP8 => Dtype::BF16,
            d => d,
        }
    }

    pub fn scales_per_token(&self) -> usize {
        if self.with_scales {
            self.hidden / QUANT_BLOCK
        } else {
            0
        }
    }

    /// Rows per local expert in the LL 3D output (`max_tokens_per_rank * num_ranks`).
    pub fn ll_expert_capacity(&self) -> usize {
        self.max_tokens_per_rank * self.num_ranks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> EpConfig {
        EpConfig { num_ranks: 4, ranks_per_node: 2, num_experts: 8, top_k: 2, hidden: 16, max_tokens_per_rank: 4, ..Default::default() }
    }

    #[test]
    fn accepts_valid() {
        base().validate().unwrap();
        assert_eq!(base().experts_per_rank(), 2);
        assert_eq!(EpConfig { num_experts: 10, ..base() }.experts_per_rank(), 3);
    }

    #[test]
    fn rejects_invalid() {
        for bad in [
            EpConfig { num_ranks: 0, ..base() },
            EpConfig { ranks_per_node: 3, ..base() },
            EpConfig { num_experts: 3, ..base() },
            EpConfig { top_k: 0, ..base() },
            EpConfig { top_k: 9, ..base() },
            EpConfig { hidden: 0, ..base() },
            EpConfig { max_tokens_per_rank: 0, ..base() },
            EpConfig { with_scales: true, ..base() },
            EpConfig { token_dtype: Dtype::FP8, with_scales: true, ..base() },
            EpConfig { token_dtype: Dtype::I32, ..base() },
            EpConfig { token_dtype: Dtype::FP8, with_scales: true, hidden: 128, algorithm: Algorithm::Ht, ..base() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        EpConfig { token_dtype: Dtype::FP8, with_scales: true, hidden: 256, ..base() }.validate().unwrap();
    }

    #[test]
    fn json_roundtrip_with_defaults() {
        let c: EpConfig = serde_json::from_str(r#"{"algorithm":"ht","num_ranks":8,"ranks_per_node":4,"num_experts":16}"#).unwrap();
        assert_eq!(c.algorithm, Algorithm::Ht);
        assert_eq!(c.ht_fifo_depth, 8);
        let back: EpConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
