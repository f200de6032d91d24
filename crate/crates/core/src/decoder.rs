//! Transition-aware decoder: strategy gate on the token embeddings, emotion
//! cross-attention gate on the encoder memory, causal transformer decoding
//! and a semantics-delta gate on the hidden states.

use crate::corpus::vocab::{TokenId, PAD};
use crate::error::{Error, Result};
use crate::numerics::loss::cross_entropy;
use crate::numerics::{
    AttentionMask, Ctx, Embedding, FeedForward, GatedFusion, Init, LayerNorm, Linear, MultiHeadAttention, ParamId,
    ParamStore, Tensor, Var,
};

/// Post-norm decoder block: causal self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attention: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(DecoderLayer {
            self_attention: MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), dim, heads)?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), dim)?,
            cross_attention: MultiHeadAttention::new(store, init, &format!("{name}.cross_attn"), dim, heads)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), dim)?,
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), dim, hidden)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim)?,
        })
    }

    pub fn forward<'a>(
        &self,
        cx: &Ctx<'a>,
        x: Var<'a>,
        memory: Var<'a>,
        causal: &AttentionMask,
        memory_mask: &AttentionMask,
    ) -> Result<Var<'a>> {
        let a = self.self_attention.forward(cx, x, x, x, Some(causal))?;
        let x = self.self_norm.forward(cx, x.add(cx.dropout(a)?)?)?;
        let c = self.cross_attention.forward(cx, x, memory, memory, Some(memory_mask))?;
        let x = self.cross_norm.forward(cx, x.add(cx.dropout(c)?)?)?;
        let f = self.ffn.forward(cx, x)?;
        self.ffn_norm.forward(cx, x.add(cx.dropout(f)?)?)
    }
}

#[derive(Clone, Debug)]
pub enum OutputProjection {
    /// Logits use the transposed token embedding table plus a bias.
    Tied { bias: ParamId },
    Untied(Linear),
}

#[derive(Clone, Debug)]
pub struct TransitionDecoder {
    pub positions: Embedding,
    pub layers: Vec<DecoderLayer>,
    pub strategy_gate: GatedFusion,
    pub emotion_attention: MultiHeadAttention,
    pub emotion_gate: GatedFusion,
    pub semantic_gate: GatedFusion,
    pub output: OutputProjection,
}

pub struct DecoderOutput<'a> {
    /// `[M, |V|]`
    pub logits: Var<'a>,
    pub hidden: Var<'a>,
    pub gate: Var<'a>,
}

/// Repeats a `[d]` vector into `[m, d]`.
pub fn broadcast_rows<'a>(v: Var<'a>, m: usize) -> Result<Var<'a>> {
    let d = v.cols();
    v.reshape(vec![1, d])?.gather_rows(&vec![0; m])
}

pub struct DecoderDims {
    pub dim: usize,
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub emotion_heads: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub tied: bool,
}

impl TransitionDecoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, dims: &DecoderDims) -> Result<Self> {
        let d = dims.dim;
        let output = if dims.tied {
            OutputProjection::Tied {
                bias: store.add("decoder.output.bias", Tensor::zeros(&[dims.vocab]))?,
            }
        } else {
            OutputProjection::Untied(Linear::new(store, init, "decoder.output", d, dims.vocab)?)
        };
        Ok(TransitionDecoder {
            positions: Embedding::new(store, init, "decoder.positions", dims.max_len, d)?,
            layers: (0..dims.layers)
                .map(|l| DecoderLayer::new(store, init, &format!("decoder.layer{l}"), d, dims.heads, dims.hidden))
                .collect::<Result<_>>()?,
            strategy_gate: GatedFusion::new(store, init, "decoder.strategy_gate", d)?,
            emotion_attention: MultiHeadAttention::new(store, init, "decoder.emotion_attn", d, dims.emotion_heads)?,
            emotion_gate: GatedFusion::new(store, init, "decoder.emotion_gate", d)?,
            semantic_gate: GatedFusion::new(store, init, "decoder.semantic_gate", d)?,
            output,
        })
    }

    pub fn max_len(&self) -> usize {
        self.positions.count
    }

    /// Token plus position embeddings of the decoder input.
    pub fn embed<'a>(&self, cx: &Ctx<'a>, token_embedding: &Embedding, ids: &[TokenId]) -> Result<Var<'a>> {
        if ids.is_empty() || ids.len() > self.max_len() {
            return Err(Error::contract(format!(
                "decoder input of {} tokens outside 1..={}",
                ids.len(),
                self.max_len()
            )));
        }
        let pos: Vec<usize> = (0..ids.len()).collect();
        let x = token_embedding.lookup(cx, ids)?.add(self.positions.lookup(cx, &pos)?)?;
        cx.dropout(x)
    }

    /// Gates the strategy state into every target embedding row.
    pub fn fuse_strategy<'a>(&self, cx: &Ctx<'a>, embeddings: Var<'a>, strategy: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let st = broadcast_rows(strategy, embeddings.rows())?;
        self.strategy_gate.fuse(cx, embeddings, st)
    }

    /// Cross-attends the memory to the emotion sequence and gates the result
    /// back in. An empty emotion sequence leaves the memory unchanged.
    pub fn fuse_emotion<'a>(&self, cx: &Ctx<'a>, memory: Var<'a>, emotions: Option<Var<'a>>) -> Result<Var<'a>> {
        let Some(emo) = emotions.filter(|e| e.rows() > 0) else {
            return Ok(memory);
        };
        let attended = self.emotion_attention.forward(cx, memory, emo, emo, None)?;
        Ok(self.emotion_gate.fuse(cx, memory, attended)?.0)
    }

    /// Causal decoding over `embeddings` against `memory`, then the
    /// semantics-delta gate and the vocabulary projection.
    pub fn decode_tokens<'a>(
        &self,
        cx: &Ctx<'a>,
        embeddings: Var<'a>,
        memory: Var<'a>,
        memory_keys: &[bool],
        sem_delta: Var<'a>,
        token_table: Var<'a>,
    ) -> Result<DecoderOutput<'a>> {
        let m = embeddings.rows();
        let causal = AttentionMask::causal(m);
        let memory_mask = AttentionMask::keys(m, memory_keys);
        let mut h = embeddings;
        for layer in &self.layers {
            h = layer.forward(cx, h, memory, &causal, &memory_mask)?;
        }
        let (hidden, gate) = self.semantic_gate.fuse(cx, h, broadcast_rows(sem_delta, m)?)?;
        let logits = match &self.output {
            OutputProjection::Tied { bias } => hidden.matmul(token_table.transpose())?.add_row(cx.p(*bias))?,
            OutputProjection::Untied(lin) => lin.forward(cx, hidden)?,
        };
        Ok(DecoderOutput { logits, hidden, gate })
    }
}

/// Mean token negative log-likelihood, PAD gold positions excluded.
pub fn generation_loss<'a>(logits: Var<'a>, gold: &[TokenId]) -> Result<Var<'a>> {
    if logits.rows() != gold.len() {
        return Err(Error::contract(format!(
            "{} decoder positions but {} gold tokens",
            logits.rows(),
            gold.len()
        )));
    }
    let keep: Vec<usize> = (0..gold.len()).filter(|&i| gold[i] != PAD).collect();
    if keep.len() == gold.len() {
        return cross_entropy(logits, gold);
    }
    let targets: Vec<TokenId> = keep.iter().map(|&i| gold[i]).collect();
    cross_entropy(logits.gather_rows(&keep)?, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{BOS, EOS};
    use crate::numerics::Graph;

    fn dims(layers: usize) -> DecoderDims {
        DecoderDims {
            dim: 4,
            vocab: 10,
            layers,
            heads: 2,
            emotion_heads: 2,
            hidden: 8,
            max_len: 8,
            tied: true,
        }
    }

    fn setup(layers: usize) -> (ParamStore, Embedding, TransitionDecoder) {
        let mut store = ParamStore::new();
        let mut init = Init::new(4);
        let tok = Embedding::new(&mut store, &mut init, "tok", 10, 4).unwrap();
        let dec = TransitionDecoder::new(&mut store, &mut init, &dims(layers)).unwrap();
        (store, tok, dec)
    }

    #[test]
    fn zero_gate_weights_average_strategy() {
        let (mut store, tok, dec) = setup(1);
        store.set(dec.strategy_gate.proj.weight, Tensor::zeros(&[8, 4])).unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let e = dec.embed(&cx, &tok, &[BOS, 6]).unwrap();
        let st = g.constant(Tensor::vector(vec![1.0, -1.0, 2.0, 0.0]));
        let (out, _) = dec.fuse_strategy(&cx, e, st).unwrap();
        let (ev, ov) = (e.value(), out.value());
        for i in 0..2 {
            for j in 0..4 {
                assert!((ov.at(i, j) - (ev.at(i, j) + st.value().data()[j]) / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_emotions_pass_memory_through() {
        let (store, _, dec) = setup(1);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let mem = g.constant(Tensor::full(&[3, 4], 0.5));
        assert_eq!(dec.fuse_emotion(&cx, mem, None).unwrap().id(), mem.id());
    }

    #[test]
    fn logits_are_causal() {
        let (store, tok, dec) = setup(2);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let mem = g.constant(Tensor::full(&[3, 4], 0.1));
        let delta = g.constant(Tensor::vector(vec![0.2; 4]));
        let table = cx.p(tok.table);
        let run = |ids: &[usize]| {
            let e = dec.embed(&cx, &tok, ids).unwrap();
            dec.decode_tokens(&cx, e, mem, &[true; 3], delta, table).unwrap().logits.value()
        };
        let a = run(&[BOS, 6, 7]);
        let b = run(&[BOS, 6, 9]);
        assert_eq!(a.shape(), &[3, 10]);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn loss_ignores_padding_and_checks_length() {
        let g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[3, 10]));
        let l = generation_loss(logits, &[7, EOS, PAD]).unwrap();
        assert!((l.item() - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(generation_loss(logits, &[7]), Err(Error::Contract(_))));
    }
}
