use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::KnowledgeSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Heads of encoder and decoder self/cross attention.
    pub heads: usize,
    /// Heads of the relation-enhanced graph attention.
    pub graph_heads: usize,
    /// Heads of the emotion cross-attention in the decoder memory fusion.
    pub emotion_heads: usize,
    pub ffn_dim: usize,
    /// Encoder positions.
    pub max_len: usize,
    /// Decoder positions.
    pub max_target_len: usize,
    pub dropout: f64,
    /// Share the output projection with the token embedding table.
    pub tie_embeddings: bool,
    /// Supervise the response placeholder's semantics delta with the gold response keywords.
    pub keyword_loss_on_placeholder: bool,
    /// Feed a label embedding of the gold (training) or predicted (inference)
    /// strategy to the decoder gate instead of the graph's strategy state.
    pub teacher_force_strategy: bool,
    pub knowledge: KnowledgeSource,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(0)
    }
}

impl ModelConfig {
    /// Default laptop-sized configuration.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            graph_heads: 4,
            emotion_heads: 4,
            ffn_dim: 256,
            max_len: 256,
            max_target_len: 64,
            dropout: 0.0,
            tie_embeddings: true,
            keyword_loss_on_placeholder: true,
            teacher_force_strategy: false,
            knowledge: KnowledgeSource::LabelEmbeddings,
            seed: 0,
        }
    }

    /// Gradient-check sized model.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            graph_heads: 2,
            emotion_heads: 4,
            ffn_dim: 32,
            max_len: 128,
            max_target_len: 32,
            ..ModelConfig::desk(vocab_size)
        }
    }

    /// Full-scale widths with a head-divisible hidden size (320 = 16 x 20).
    pub fn large(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 320,
            encoder_layers: 8,
            decoder_layers: 8,
            heads: 16,
            graph_heads: 16,
            emotion_heads: 4,
            ffn_dim: 1280,
            max_len: 512,
            max_target_len: 128,
            ..ModelConfig::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        for (name, heads) in [
            ("heads", self.heads),
            ("graph_heads", self.graph_heads),
            ("emotion_heads", self.emotion_heads),
        ] {
            if heads == 0 || !self.d_model.is_multiple_of(heads) {
                return Err(Error::config(format!(
                    "d_model {} is not divisible by {name} = {heads}",
                    self.d_model
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.max_len < 2 || self.max_target_len < 2 {
            return Err(Error::config("max_len and max_target_len must be at least 2"));
        }
        Ok(())
    }
}
