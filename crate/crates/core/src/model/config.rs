use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How encoder layers own their parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    /// Every layer has its own parameters.
    None,
    /// Layers are split into `num_stages` contiguous groups of
    /// `num_layers / num_stages`; the layers of a group share one set.
    Grouped,
}

/// Which input-side parameters freeze after the first stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFreeze {
    /// Word, position and segment embeddings and the embedding layernorm.
    All,
    /// Only the (tied) word embedding; the rest stays trainable.
    Word,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub type_vocab: usize,
    pub num_stages: usize,
    pub sharing: Sharing,
    pub layernorm_eps: f64,
    pub dropout: f64,
    pub embedding_freeze: EmbeddingFreeze,
}

impl Default for ModelConfig {
    /// BERT-Base geometry with four training stages.
    fn default() -> Self {
        Self {
            num_layers: 12,
            hidden: 768,
            heads: 12,
            ffn_size: 3072,
            vocab_size: 30522,
            max_seq_len: 512,
            type_vocab: 2,
            num_stages: 4,
            sharing: Sharing::None,
            layernorm_eps: 1e-12,
            dropout: 0.0,
            embedding_freeze: EmbeddingFreeze::All,
        }
    }
}

impl ModelConfig {
    /// Small geometry with `ffn_size = 4 * hidden`.
    pub fn tiny(num_layers: usize, hidden: usize, heads: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            num_layers,
            hidden,
            heads,
            ffn_size: 4 * hidden,
            vocab_size,
            max_seq_len,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Layers added per stage.
    pub fn layers_per_stage(&self) -> usize {
        self.num_layers / self.num_stages
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn_size == 0 {
            return fail("num_layers, hidden, heads and ffn_size must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.num_stages == 0 || !self.num_layers.is_multiple_of(self.num_stages) {
            return fail(format!(
                "num_layers {} not divisible by num_stages {}",
                self.num_layers, self.num_stages
            ));
        }
        if self.vocab_size <= crate::data::NUM_SPECIAL {
            return fail(format!(
                "vocab_size {} must exceed the {} special tokens",
                self.vocab_size,
                crate::data::NUM_SPECIAL
            ));
        }
        if self.max_seq_len < 3 {
            return fail(format!("max_seq_len {} cannot hold [CLS] and two [SEP]", self.max_seq_len));
        }
        if self.type_vocab != 2 {
            return fail(format!("type_vocab must be 2, got {}", self.type_vocab));
        }
        if !(self.layernorm_eps > 0.0) {
            return fail(format!("layernorm_eps must be positive, got {}", self.layernorm_eps));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Scalars in one encoder layer:
    /// `4(H^2 + H)` attention projections, `2HF + F + H` FFN,
    /// `4H` for the two layernorms.
    pub fn layer_param_count(&self) -> usize {
        let (h, f) = (self.hidden, self.ffn_size);
        4 * (h * h + h) + 2 * h * f + f + h + 4 * h
    }

    /// Word + position + segment tables and the embedding layernorm.
    pub fn embedding_param_count(&self) -> usize {
        let h = self.hidden;
        (self.vocab_size + self.max_seq_len + self.type_vocab) * h + 2 * h
    }

    /// MLM transform, its layernorm and the output bias (the decoder weight
    /// is the word embedding), then NSP pooler and classifier.
    pub fn head_param_count(&self) -> usize {
        let h = self.hidden;
        let mlm = h * h + h + 2 * h + self.vocab_size;
        let nsp = h * h + h + 2 * h + 2;
        mlm + nsp
    }

    /// Distinct encoder parameter sets at `depth` layers.
    pub fn encoder_sets(&self, depth: usize) -> usize {
        match self.sharing {
            Sharing::None => depth,
            Sharing::Grouped => depth.div_ceil(self.layers_per_stage()),
        }
    }

    /// Closed-form number of distinct scalars in a model of `depth` layers.
    pub fn param_count(&self, depth: usize) -> usize {
        self.embedding_param_count()
            + self.encoder_sets(depth) * self.layer_param_count()
            + self.head_param_count()
    }
}
