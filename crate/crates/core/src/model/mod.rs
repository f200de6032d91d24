//! The full transition-aware response model.

mod config;
mod knowledge;

use std::path::Path;

pub use config::ModelConfig;
pub use knowledge::{KnowledgeProvider, KnowledgeSource, LabelKnowledge, ZeroKnowledge};

use serde::{Deserialize, Serialize};

use crate::corpus::{PrepareOptions, PreparedExample, Speaker, Strategy, Vocab};
use crate::decoder::{generation_loss, DecoderDims, TransitionDecoder};
use crate::encoder::{ContextEncoder, ContextEncoding};
use crate::error::{Error, Result};
use crate::heads::{bow_keyword_loss, emotion_loss, semantic_deltas, strategy_loss, StateHeads};
use crate::numerics::checkpoint::{load_params, read_sidecar, read_tensors, write_sidecar, write_tensors};
use crate::numerics::{Ctx, Embedding, Init, ParamStore, Tensor, Var};
use crate::transition_graph::{init_states, GraphStates, StateKind, TransitionGraph, TransitionNetwork, TtiOutput};

#[derive(Debug)]
pub struct TransitionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub tokens: Embedding,
    pub encoder: ContextEncoder,
    pub network: TransitionNetwork,
    pub heads: StateHeads,
    pub decoder: TransitionDecoder,
    /// Strategy label embeddings fed to the decoder when strategy teacher forcing is on.
    pub strategy_labels: Option<Embedding>,
    knowledge: Box<dyn KnowledgeProvider>,
}

/// Everything computed from the dialogue history, shared by all decoding steps.
pub struct ContextSide<'a> {
    pub encoding: ContextEncoding<'a>,
    pub graph: TransitionGraph,
    pub tti: TtiOutput<'a>,
    /// `[n_nodes, d]`
    pub deltas: Var<'a>,
    /// `[n_nodes, |V|]`
    pub keyword_logits: Var<'a>,
    /// `[n_supporter_nodes, 8]`; the last row is the response placeholder.
    pub strategy_logits: Var<'a>,
    /// `[n_seeker_nodes, 6]`
    pub emotion_logits: Option<Var<'a>>,
    pub memory: Var<'a>,
    pub memory_keys: Vec<bool>,
    pub strategy_state: Var<'a>,
    pub placeholder_delta: Var<'a>,
}

impl ContextSide<'_> {
    /// Probabilities of the response strategy.
    pub fn strategy_distribution(&self) -> Vec<f64> {
        let logits = self.strategy_logits.value();
        softmax_vec(logits.row(logits.rows() - 1))
    }
}

pub struct LossParts<'a> {
    pub generation: Var<'a>,
    pub semantics: Var<'a>,
    pub strategy: Var<'a>,
    pub emotion: Var<'a>,
}

impl TransitionModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed);
        let tokens = Embedding::new(&mut params, &mut init, "tokens", config.vocab_size, d)?;
        let encoder = ContextEncoder::new(
            &mut params,
            &mut init,
            d,
            config.encoder_layers,
            config.heads,
            config.ffn_dim,
            config.max_len,
        )?;
        let network = TransitionNetwork::new(&mut params, &mut init, d, config.graph_heads)?;
        let heads = StateHeads::new(&mut params, &mut init, d, config.vocab_size)?;
        let decoder = TransitionDecoder::new(
            &mut params,
            &mut init,
            &DecoderDims {
                dim: d,
                vocab: config.vocab_size,
                layers: config.decoder_layers,
                heads: config.heads,
                emotion_heads: config.emotion_heads,
                hidden: config.ffn_dim,
                max_len: config.max_target_len,
                tied: config.tie_embeddings,
            },
        )?;
        let strategy_labels = if config.teacher_force_strategy {
            Some(Embedding::new(&mut params, &mut init, "decoder.strategy_labels", Strategy::COUNT, d)?)
        } else {
            None
        };
        let knowledge: Box<dyn KnowledgeProvider> = match config.knowledge {
            KnowledgeSource::Zeros => Box::new(ZeroKnowledge { dim: d }),
            KnowledgeSource::LabelEmbeddings => Box::new(LabelKnowledge::new(&mut params, &mut init, d)?),
        };
        Ok(TransitionModel {
            config,
            params,
            tokens,
            encoder,
            network,
            heads,
            decoder,
            strategy_labels,
            knowledge,
        })
    }

    /// Swaps in another knowledge provider; its parameters must already live in `self.params`.
    pub fn set_knowledge(&mut self, provider: Box<dyn KnowledgeProvider>) -> Result<()> {
        if provider.dim() != self.config.d_model {
            return Err(Error::config(format!(
                "knowledge dimension {} differs from model dimension {}",
                provider.dim(),
                self.config.d_model
            )));
        }
        self.knowledge = provider;
        Ok(())
    }

    pub fn ctx<'a>(&'a self, graph: &'a crate::numerics::Graph) -> Ctx<'a> {
        Ctx::new(graph, &self.params)
    }

    /// Encoder, transition graph and heads. With `gold_strategy` set (and
    /// strategy teacher forcing configured) the decoder sees the gold label's
    /// embedding, otherwise the predicted one.
    pub fn context_side<'a>(&self, cx: &Ctx<'a>, ex: &PreparedExample, gold_strategy: bool) -> Result<ContextSide<'a>> {
        let encoding = self.encoder.encode(cx, &self.tokens, &ex.context)?;
        let graph = TransitionGraph::build(&ex.window)?;
        if graph.len() != ex.nodes.len() {
            return Err(Error::contract(format!("{}: {} nodes but {} node labels", ex.id, graph.len(), ex.nodes.len())));
        }

        let dropped = encoding.dropped_utterances;
        let cls_rows = ex
            .nodes
            .iter()
            .map(|n| {
                n.turn
                    .checked_sub(dropped)
                    .ok_or_else(|| Error::contract(format!("{}: window turn {} was truncated away", ex.id, n.turn)))
            })
            .collect::<Result<Vec<_>>>()?;
        let cls = encoding.cls_states.gather_rows(&cls_rows)?;

        let seekers = graph.nodes_with(StateKind::Emotion);
        let csk = if seekers.is_empty() {
            None
        } else {
            let rows = seekers
                .iter()
                .map(|&i| self.knowledge_row(cx, ex, i, true))
                .collect::<Result<Vec<_>>>()?;
            Some(Var::concat_rows(&rows)?)
        };
        let initial = init_states(&graph, cls, csk)?;
        let tti = self.network.forward(cx, &graph, initial)?;

        let deltas = semantic_deltas(tti.fused.semantics(), tti.initial.semantics())?;
        let keyword_logits = self.heads.keyword_logits(cx, deltas)?;
        let strat = tti.fused.get(StateKind::Strategy).ok_or_else(|| Error::contract("graph has no supporter node"))?;
        let strategy_logits = self.heads.strategy_logits(cx, strat)?;
        let emotion_logits = match tti.fused.get(StateKind::Emotion) {
            Some(e) => Some(self.heads.emotion_logits(cx, e)?),
            None => None,
        };

        let emotions = self.emotion_sequence(cx, ex, &graph, &tti.fused)?;
        let memory = self.decoder.fuse_emotion(cx, encoding.token_states, emotions)?;
        let memory_keys = ex.context[ex.context.len() - encoding.token_states.rows()..]
            .iter()
            .map(|&t| t != crate::corpus::vocab::PAD)
            .collect();

        let last = strat.rows() - 1;
        let strategy_state = match &self.strategy_labels {
            None => strat.row(last)?,
            Some(table) => {
                let label = match (gold_strategy, ex.gold_strategy()) {
                    (true, Some(s)) => s.index(),
                    _ => argmax(strategy_logits.value().row(last)),
                };
                table.lookup(cx, &[label])?.reshape(vec![self.config.d_model])?
            }
        };
        let placeholder_delta = deltas.row(graph.len() - 1)?;

        Ok(ContextSide {
            encoding,
            graph,
            tti,
            deltas,
            keyword_logits,
            strategy_logits,
            emotion_logits,
            memory,
            memory_keys,
            strategy_state,
            placeholder_delta,
        })
    }

    fn knowledge_row<'a>(&self, cx: &Ctx<'a>, ex: &PreparedExample, node: usize, seeker: bool) -> Result<Var<'a>> {
        let spec = &ex.nodes[node];
        let v = if seeker {
            self.knowledge.seeker(cx, spec)?
        } else {
            self.knowledge.supporter(cx, spec)?
        };
        if v.value().numel() != self.config.d_model {
            return Err(Error::config(format!(
                "knowledge dimension {} differs from model dimension {}",
                v.value().numel(),
                self.config.d_model
            )));
        }
        v.reshape(vec![1, self.config.d_model])
    }

    /// Seeker emotion states and supporter listener-reaction vectors, in turn order.
    fn emotion_sequence<'a>(
        &self,
        cx: &Ctx<'a>,
        ex: &PreparedExample,
        graph: &TransitionGraph,
        fused: &GraphStates<'a>,
    ) -> Result<Option<Var<'a>>> {
        let mut rows = Vec::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            if node.placeholder {
                continue;
            }
            match node.speaker {
                Speaker::Seeker => {
                    let r = graph.row_of(StateKind::Emotion, i).expect("seeker row");
                    let bank = fused.get(StateKind::Emotion).expect("emotion bank");
                    rows.push(bank.gather_rows(&[r])?);
                }
                Speaker::Supporter => rows.push(self.knowledge_row(cx, ex, i, false)?),
            }
        }
        if rows.is_empty() {
            Ok(None)
        } else {
            Ok(Some(Var::concat_rows(&rows)?))
        }
    }

    /// `[M, |V|]` logits for decoder input `input` (starting with BOS).
    pub fn decode<'a>(&self, cx: &Ctx<'a>, side: &ContextSide<'a>, input: &[usize]) -> Result<Var<'a>> {
        let e = self.decoder.embed(cx, &self.tokens, input)?;
        let (e, _) = self.decoder.fuse_strategy(cx, e, side.strategy_state)?;
        Ok(self
            .decoder
            .decode_tokens(cx, e, side.memory, &side.memory_keys, side.placeholder_delta, cx.p(self.tokens.table))?
            .logits)
    }

    /// Teacher-forced losses of one example.
    pub fn losses<'a>(&self, cx: &Ctx<'a>, ex: &PreparedExample) -> Result<(ContextSide<'a>, LossParts<'a>)> {
        if !ex.has_target() {
            return Err(Error::data(format!("{}: no gold response", ex.id)));
        }
        let side = self.context_side(cx, ex, true)?;
        let logits = self.decode(cx, &side, &ex.target_input)?;
        let generation = generation_loss(logits, &ex.target_output)?;

        let bags: Vec<Vec<usize>> = ex
            .nodes
            .iter()
            .map(|n| {
                if n.placeholder && !self.config.keyword_loss_on_placeholder {
                    Vec::new()
                } else {
                    n.keywords.clone()
                }
            })
            .collect();
        let semantics = if bags.iter().all(Vec::is_empty) {
            cx.constant(Tensor::scalar(0.0))
        } else {
            bow_keyword_loss(side.keyword_logits, &bags)?
        };

        let strat_golds: Vec<_> = side
            .graph
            .nodes_with(StateKind::Strategy)
            .into_iter()
            .map(|i| ex.nodes[i].strategy)
            .collect();
        let strategy = strategy_loss(side.strategy_logits, &strat_golds)?;

        let emotion = match side.emotion_logits {
            Some(logits) => {
                let golds: Vec<_> = side
                    .graph
                    .nodes_with(StateKind::Emotion)
                    .into_iter()
                    .map(|i| ex.nodes[i].emotion)
                    .collect();
                emotion_loss(logits, &golds)?
            }
            None => cx.constant(Tensor::scalar(0.0)),
        };
        Ok((side, LossParts { generation, semantics, strategy, emotion }))
    }

    /// Writes parameters (f32) and a sidecar with the config and `meta`.
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        self.save_with(path, meta, &[])
    }

    /// Like [`save`](Self::save), with additional named tensors.
    pub fn save_with(&self, path: &Path, meta: &CheckpointMeta, extra: &[(String, &Tensor)]) -> Result<()> {
        let mut entries: Vec<(String, &Tensor)> = self.params.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
        entries.extend(extra.iter().map(|(n, t)| (n.clone(), *t)));
        write_tensors(path, &entries)?;
        let meta = CheckpointMeta {
            model: self.config.clone(),
            ..meta.clone()
        };
        write_sidecar(path, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let meta = CheckpointMeta::read(path)?;
        let mut model = TransitionModel::new(meta.model.clone())?;
        load_params(&mut model.params, &read_tensors(path)?)?;
        Ok((model, meta))
    }
}

/// Sidecar stored next to every checkpoint.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub vocab: Option<Vocab>,
    #[serde(default)]
    pub prepare: Option<PrepareOptions>,
    /// Trainer position for resuming.
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

impl CheckpointMeta {
    pub fn read(path: &Path) -> Result<Self> {
        let mut meta: CheckpointMeta = read_sidecar(path)?;
        if let Some(v) = meta.vocab.as_mut() {
            v.rebuild_index();
        }
        Ok(meta)
    }
}

pub(crate) fn softmax_vec(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{prepare_example, synthetic_corpus, PrepareOptions, Vocab, VocabOptions};
    use crate::numerics::Graph;

    #[test]
    fn forward_produces_finite_losses() {
        let ds = synthetic_corpus(4, 1);
        let vocab = Vocab::fit(&ds, &VocabOptions::default());
        let model = TransitionModel::new(ModelConfig::tiny(vocab.len())).unwrap();
        for d in &ds {
            let ex = prepare_example(d, &vocab, &PrepareOptions::default()).unwrap();
            let g = Graph::new();
            let cx = model.ctx(&g);
            let (side, parts) = model.losses(&cx, &ex).unwrap();
            for v in [parts.generation, parts.semantics, parts.strategy, parts.emotion] {
                assert!(v.item().is_finite());
            }
            let p = side.strategy_distribution();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = TransitionModel::new(ModelConfig::tiny(30)).unwrap();
        model.params.round_to_f32();
        model.save(&path, &CheckpointMeta::default()).unwrap();
        let (back, meta) = TransitionModel::load(&path).unwrap();
        assert_eq!(meta.model, model.config);
        for ((_, a, x), (_, b, y)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a, b);
            assert_eq!(x, y);
        }
    }
}
