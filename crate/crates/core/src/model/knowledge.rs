//! Per-turn knowledge vectors: a reaction vector for each seeker turn (added
//! to the initial emotion state) and a listener-reaction vector for each
//! supporter turn (fed to the decoder's emotion memory).

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::corpus::NodeSpec;
use crate::error::{Error, Result};
use crate::numerics::{Ctx, Embedding, Init, ParamStore, Tensor, Var};

pub trait KnowledgeProvider: Debug {
    fn dim(&self) -> usize;

    /// Knowledge for a seeker node, shape `[dim]`.
    fn seeker<'a>(&self, cx: &Ctx<'a>, node: &NodeSpec) -> Result<Var<'a>>;

    /// Knowledge for a history supporter node, shape `[dim]`.
    fn supporter<'a>(&self, cx: &Ctx<'a>, node: &NodeSpec) -> Result<Var<'a>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeSource {
    Zeros,
    /// Learned embedding of the turn's emotion (seeker) or strategy (supporter) label.
    #[default]
    LabelEmbeddings,
}

#[derive(Clone, Debug)]
pub struct ZeroKnowledge {
    pub dim: usize,
}

impl KnowledgeProvider for ZeroKnowledge {
    fn dim(&self) -> usize {
        self.dim
    }

    fn seeker<'a>(&self, cx: &Ctx<'a>, _node: &NodeSpec) -> Result<Var<'a>> {
        Ok(cx.constant(Tensor::zeros(&[self.dim])))
    }

    fn supporter<'a>(&self, cx: &Ctx<'a>, _node: &NodeSpec) -> Result<Var<'a>> {
        Ok(cx.constant(Tensor::zeros(&[self.dim])))
    }
}

#[derive(Clone, Debug)]
pub struct LabelKnowledge {
    pub emotion: Embedding,
    pub strategy: Embedding,
}

impl LabelKnowledge {
    pub fn new(store: &mut ParamStore, init: &mut Init, dim: usize) -> Result<Self> {
        use crate::corpus::{Emotion, Strategy};
        Ok(LabelKnowledge {
            emotion: Embedding::new(store, init, "knowledge.emotion", Emotion::COUNT, dim)?,
            strategy: Embedding::new(store, init, "knowledge.strategy", Strategy::COUNT, dim)?,
        })
    }
}

impl KnowledgeProvider for LabelKnowledge {
    fn dim(&self) -> usize {
        self.emotion.dim
    }

    fn seeker<'a>(&self, cx: &Ctx<'a>, node: &NodeSpec) -> Result<Var<'a>> {
        let e = node
            .emotion
            .ok_or_else(|| Error::data(format!("seeker turn {} has no emotion label", node.turn)))?;
        self.emotion.lookup(cx, &[e.index()])?.reshape(vec![self.dim()])
    }

    fn supporter<'a>(&self, cx: &Ctx<'a>, node: &NodeSpec) -> Result<Var<'a>> {
        let s = node
            .strategy
            .ok_or_else(|| Error::data(format!("supporter turn {} has no strategy label", node.turn)))?;
        self.strategy.lookup(cx, &[s.index()])?.reshape(vec![self.dim()])
    }
}
