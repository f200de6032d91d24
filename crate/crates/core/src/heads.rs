//! Turn-level supervision heads: keywords from semantics deltas, strategy on
//! supporter nodes, emotion on seeker nodes.

use crate::corpus::{Emotion, Strategy};
use crate::error::{Error, Result};
use crate::numerics::loss::{bag_of_words, cross_entropy};
use crate::numerics::{Ctx, Init, Linear, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct StateHeads {
    pub keyword: Linear,
    pub strategy: Linear,
    pub emotion: Linear,
}

impl StateHeads {
    pub fn new(store: &mut ParamStore, init: &mut Init, dim: usize, vocab: usize) -> Result<Self> {
        Ok(StateHeads {
            keyword: Linear::new(store, init, "heads.keyword", dim, vocab)?,
            strategy: Linear::new(store, init, "heads.strategy", dim, Strategy::COUNT)?,
            emotion: Linear::new(store, init, "heads.emotion", dim, Emotion::COUNT)?,
        })
    }

    /// `[n, |V|]` keyword logits from `[n, d]` semantics deltas.
    pub fn keyword_logits<'a>(&self, cx: &Ctx<'a>, deltas: Var<'a>) -> Result<Var<'a>> {
        self.keyword.forward(cx, deltas)
    }

    pub fn strategy_logits<'a>(&self, cx: &Ctx<'a>, states: Var<'a>) -> Result<Var<'a>> {
        self.strategy.forward(cx, states)
    }

    pub fn emotion_logits<'a>(&self, cx: &Ctx<'a>, states: Var<'a>) -> Result<Var<'a>> {
        self.emotion.forward(cx, states)
    }
}

/// `Δ = ŝ - s`.
pub fn semantic_deltas<'a>(fused: Var<'a>, initial: Var<'a>) -> Result<Var<'a>> {
    fused.sub(initial)
}

/// Bag-of-words keyword loss; nodes with an empty keyword set are unsupervised.
pub fn bow_keyword_loss<'a>(keyword_logits: Var<'a>, keyword_sets: &[Vec<usize>]) -> Result<Var<'a>> {
    bag_of_words(keyword_logits, keyword_sets)
}

pub fn strategy_loss<'a>(logits: Var<'a>, golds: &[Option<Strategy>]) -> Result<Var<'a>> {
    let targets = golds
        .iter()
        .enumerate()
        .map(|(i, g)| g.map(Strategy::index).ok_or_else(|| Error::data(format!("supporter node {i} has no gold strategy"))))
        .collect::<Result<Vec<_>>>()?;
    cross_entropy(logits, &targets)
}

pub fn emotion_loss<'a>(logits: Var<'a>, golds: &[Option<Emotion>]) -> Result<Var<'a>> {
    let targets = golds
        .iter()
        .enumerate()
        .map(|(i, g)| g.map(Emotion::index).ok_or_else(|| Error::data(format!("seeker node {i} has no gold emotion"))))
        .collect::<Result<Vec<_>>>()?;
    cross_entropy(logits, &targets)
}

/// Row-wise probabilities of a `[n, c]` logit matrix as plain vectors.
pub fn probabilities(logits: Var<'_>) -> Result<Vec<Vec<f64>>> {
    let p = logits.softmax()?.value();
    Ok((0..p.rows()).map(|i| p.row(i).to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    #[test]
    fn uniform_logits_give_log_class_count() {
        let g = Graph::new();
        let s = strategy_loss(g.constant(Tensor::zeros(&[2, 8])), &[Some(Strategy::Question), Some(Strategy::Others)]).unwrap();
        assert!((s.item() - 8f64.ln()).abs() < 1e-12);
        let e = emotion_loss(g.constant(Tensor::zeros(&[1, 6])), &[Some(Emotion::Fear)]).unwrap();
        assert!((e.item() - 6f64.ln()).abs() < 1e-12);
        let k = bow_keyword_loss(g.constant(Tensor::zeros(&[1, 4])), &[vec![2]]).unwrap();
        assert!((k.item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_node_hand_mean() {
        // gold probabilities .5 and .25
        let g = Graph::new();
        let row = |p: f64| {
            let mut v = vec![((1.0 - p) / 7.0).ln(); 8];
            v[0] = p.ln();
            v
        };
        let logits = g.constant(Tensor::matrix(&[row(0.5), row(0.25)]).unwrap());
        let l = strategy_loss(logits, &[Some(Strategy::Question); 2]).unwrap();
        assert!((l.item() - (-(0.5f64.ln() + 0.25f64.ln()) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn missing_gold_is_data_error() {
        let g = Graph::new();
        let r = strategy_loss(g.constant(Tensor::zeros(&[1, 8])), &[None]);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut store = ParamStore::new();
        let heads = StateHeads::new(&mut store, &mut Init::new(0), 2, 5).unwrap();
        store.set(heads.strategy.weight, Tensor::zeros(&[2, 8])).unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let logits = heads.strategy_logits(&cx, g.constant(Tensor::matrix(&[vec![0.3, -1.0]]).unwrap())).unwrap();
        for p in &probabilities(logits).unwrap()[0] {
            assert!((p - 0.125).abs() < 1e-12);
        }
    }
}
