//! Analytic per-step cost: matmul FLOPs and gradient-synchronization bytes.
//!
//! Counting rules, with `T = batch * seq` tokens:
//! - encoder layer forward: `8 T H^2` (Q, K, V, output projections)
//!   `+ 4 batch seq^2 H` (scores and context) `+ 4 T H F` (FFN);
//! - heads forward: MLM transform and tied decoder over
//!   `M = ceil(0.15 T)` masked positions, NSP pooler and classifier over
//!   `batch` rows: `2 M H (H + V) + 2 batch H (H + 2)`;
//! - backward: a trainable layer costs twice its forward (input grad and
//!   weight grad), a frozen one costs nothing, trainable heads twice theirs;
//! - communication: one all-reduce of 8-byte gradients per trainable scalar.
//!
//! Embedding lookups, layernorm, softmax and activations are not counted.

use serde::{Deserialize, Serialize};

use super::{EmbeddingFreeze, ModelConfig, Sharing, TrainablePartition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub encoder_forward_flops: u64,
    pub encoder_backward_flops: u64,
    pub head_forward_flops: u64,
    pub head_backward_flops: u64,
    pub comm_bytes: u64,
    pub trainable_params: u64,
    pub total_params: u64,
}

/// Masked positions per batch assumed by the cost model.
pub fn masked_positions(batch: usize, seq: usize) -> u64 {
    ((batch * seq * 15) as u64).div_ceil(100)
}

pub fn layer_forward_flops(config: &ModelConfig, batch: usize, seq: usize) -> u64 {
    let (b, s) = (batch as u64, seq as u64);
    let (h, f) = (config.hidden as u64, config.ffn_size as u64);
    let t = b * s;
    8 * t * h * h + 4 * b * s * s * h + 4 * t * h * f
}

pub fn head_forward_flops(config: &ModelConfig, batch: usize, seq: usize) -> u64 {
    let (h, v, b) = (config.hidden as u64, config.vocab_size as u64, batch as u64);
    let m = masked_positions(batch, seq);
    2 * m * h * (h + v) + 2 * b * h * (h + 2)
}

/// Distinct trainable scalars implied by `partition` at `depth`.
pub fn trainable_param_count(config: &ModelConfig, depth: usize, partition: &TrainablePartition) -> u64 {
    let h = config.hidden;
    let mut n = 0usize;
    let word = config.vocab_size * h;
    let rest = config.embedding_param_count() - word;
    if partition.embeddings_trainable {
        n += word + rest;
    } else if config.embedding_freeze == EmbeddingFreeze::Word {
        n += rest;
    }
    let sets = match config.sharing {
        Sharing::None => partition.trainable_layers.iter().filter(|&&l| l < depth).count(),
        Sharing::Grouped => {
            let g = config.layers_per_stage();
            let mut groups: Vec<usize> = partition
                .trainable_layers
                .iter()
                .filter(|&&l| l < depth)
                .map(|l| l / g)
                .collect();
            groups.dedup();
            groups.len()
        }
    };
    n += sets * config.layer_param_count();
    if partition.heads_trainable {
        n += config.head_param_count();
    }
    n as u64
}

/// Cost of one training step on a `depth`-layer model under `partition`.
pub fn count_cost(
    config: &ModelConfig,
    depth: usize,
    partition: &TrainablePartition,
    batch: usize,
    seq: usize,
) -> CostReport {
    let layer = layer_forward_flops(config, batch, seq);
    let trainable_layers = partition.trainable_layers.iter().filter(|&&l| l < depth).count() as u64;
    let encoder_forward_flops = depth as u64 * layer;
    let encoder_backward_flops = 2 * layer * trainable_layers;
    let head_forward_flops = head_forward_flops(config, batch, seq);
    let head_backward_flops = if partition.heads_trainable { 2 * head_forward_flops } else { 0 };
    let trainable_params = trainable_param_count(config, depth, partition);
    CostReport {
        forward_flops: encoder_forward_flops + head_forward_flops,
        backward_flops: encoder_backward_flops + head_backward_flops,
        encoder_forward_flops,
        encoder_backward_flops,
        head_forward_flops,
        head_backward_flops,
        comm_bytes: 8 * trainable_params,
        trainable_params,
        total_params: config.param_count(depth) as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn frozen_encoder_has_no_backward() {
        let c = ModelConfig::tiny(4, 8, 2, 32, 16);
        let mut p = TrainablePartition::frozen();
        p.heads_trainable = true;
        let r = count_cost(&c, 4, &p, 2, 8);
        assert_eq!(r.encoder_backward_flops, 0);
        assert!(r.backward_flops > 0);
        let all = count_cost(&c, 4, &TrainablePartition::all(4), 2, 8);
        assert_eq!(all.encoder_backward_flops, 2 * all.encoder_forward_flops);
    }

    #[test]
    fn quarter_of_layers_quarter_of_backward() {
        let c = ModelConfig::default();
        let all = count_cost(&c, 12, &TrainablePartition::all(12), 32, 128);
        let top = count_cost(&c, 12, &TrainablePartition::top(9, 12), 32, 128);
        assert_eq!(4 * top.encoder_backward_flops, all.encoder_backward_flops);
    }

    #[test]
    fn trainable_count_matches_model() {
        for sharing in [Sharing::None, Sharing::Grouped] {
            let mut c = ModelConfig::tiny(4, 8, 2, 32, 16);
            c.num_stages = 2;
            c.sharing = sharing;
            let mut m = build_model(&c, 1).unwrap();
            for p in [TrainablePartition::all(4), TrainablePartition::top(2, 4), TrainablePartition::top(3, 4)] {
                m.set_partition(p.clone()).unwrap();
                let r = count_cost(&c, 4, &p, 2, 8);
                assert_eq!(r.trainable_params as usize, m.store.trainable_scalars());
                assert_eq!(r.total_params as usize, m.store.num_scalars());
                assert_eq!(r.comm_bytes, 8 * r.trainable_params);
            }
        }
    }
}
