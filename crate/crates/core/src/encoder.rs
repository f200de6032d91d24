//! Transformer context encoder over the flattened `[CLS] u_1 [CLS] u_2 ... [CLS]` history.

use crate::corpus::vocab::{TokenId, CLS, PAD};
use crate::error::{Error, Result};
use crate::numerics::{AttentionMask, Ctx, Embedding, FeedForward, Init, LayerNorm, MultiHeadAttention, ParamStore, Var};

/// Post-norm encoder block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(EncoderLayer {
            attention: MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, heads)?,
            attention_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim)?,
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), dim, hidden)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim)?,
        })
    }

    pub fn forward<'a>(&self, cx: &Ctx<'a>, x: Var<'a>, mask: &AttentionMask) -> Result<Var<'a>> {
        let a = self.attention.forward(cx, x, x, x, Some(mask))?;
        let x = self.attention_norm.forward(cx, x.add(cx.dropout(a)?)?)?;
        let f = self.ffn.forward(cx, x)?;
        self.ffn_norm.forward(cx, x.add(cx.dropout(f)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub positions: Embedding,
    pub layers: Vec<EncoderLayer>,
}

#[derive(Clone, Debug)]
pub struct ContextEncoding<'a> {
    /// `[L, d]`
    pub token_states: Var<'a>,
    /// `[N + 1, d]`, one row per CLS marker.
    pub cls_states: Var<'a>,
    pub cls_positions: Vec<usize>,
    /// Oldest utterances dropped to respect the position budget.
    pub dropped_utterances: usize,
    pub warnings: Vec<String>,
}

impl ContextEncoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        dim: usize,
        layers: usize,
        heads: usize,
        hidden: usize,
        max_len: usize,
    ) -> Result<Self> {
        Ok(ContextEncoder {
            positions: Embedding::new(store, init, "encoder.positions", max_len, dim)?,
            layers: (0..layers)
                .map(|l| EncoderLayer::new(store, init, &format!("encoder.layer{l}"), dim, heads, hidden))
                .collect::<Result<_>>()?,
        })
    }

    pub fn max_len(&self) -> usize {
        self.positions.count
    }

    /// Encodes a CLS-delimited token sequence. Trailing PAD tokens are
    /// masked out as keys. Over-long inputs lose their oldest utterances.
    pub fn encode<'a>(&self, cx: &Ctx<'a>, token_embedding: &Embedding, tokens: &[TokenId]) -> Result<ContextEncoding<'a>> {
        if tokens.first() != Some(&CLS) {
            return Err(Error::contract("context must begin with a CLS marker"));
        }
        let mut tokens = tokens;
        let mut warnings = Vec::new();
        let mut dropped = 0;
        while tokens.len() > self.max_len() {
            let next = tokens[1..]
                .iter()
                .position(|&t| t == CLS)
                .map(|p| p + 1)
                .filter(|&p| p < tokens.len() - 1)
                .ok_or_else(|| Error::contract("final utterance alone exceeds the encoder length"))?;
            tokens = &tokens[next..];
            dropped += 1;
        }
        if dropped > 0 {
            warnings.push(format!("dropped {dropped} oldest utterances to fit {} positions", self.max_len()));
        }

        let cls_positions: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] == CLS).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut x = token_embedding
            .lookup(cx, tokens)?
            .add(self.positions.lookup(cx, &positions)?)?;
        x = cx.dropout(x)?;

        let keys: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
        let mask = AttentionMask::keys(tokens.len(), &keys);
        for layer in &self.layers {
            x = layer.forward(cx, x, &mask)?;
        }
        Ok(ContextEncoding {
            token_states: x,
            cls_states: x.gather_rows(&cls_positions)?,
            cls_positions,
            dropped_utterances: dropped,
            warnings,
        })
    }
}
