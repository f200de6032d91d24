//! Turning dialogues into model-ready examples.

use serde::{Deserialize, Serialize};

use crate::corpus::lexicon::lexicon_emotion;
use crate::corpus::vocab::{TokenId, Vocab, BOS, CLS, EOS};
use crate::corpus::window::{window_over, TransitionWindow};
use crate::corpus::{Dialogue, Emotion, Speaker, Strategy, Utterance};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    /// Transition window size (count of supporter turns looked back).
    pub window: usize,
    /// Keywords per utterance when the data carries none.
    pub keywords_k: usize,
    pub max_context_len: usize,
    pub max_target_len: usize,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            window: 2,
            keywords_k: 5,
            max_context_len: 256,
            max_target_len: 40,
        }
    }
}

/// One transition-graph node with its supervision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    /// Index into the (possibly left-truncated) history; the placeholder
    /// uses `history.len()`.
    pub turn: usize,
    pub speaker: Speaker,
    pub strategy: Option<Strategy>,
    pub emotion: Option<Emotion>,
    pub keywords: Vec<TokenId>,
    pub placeholder: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedExample {
    pub id: String,
    /// Flattened history: `[CLS] u_1 [CLS] u_2 ... [CLS]`, the last CLS
    /// standing for the upcoming response.
    pub context: Vec<TokenId>,
    pub cls_positions: Vec<usize>,
    pub window: TransitionWindow,
    pub nodes: Vec<NodeSpec>,
    /// `[BOS] y_1 .. y_M`
    pub target_input: Vec<TokenId>,
    /// `y_1 .. y_M [EOS]`; empty when there is no gold response.
    pub target_output: Vec<TokenId>,
    pub target_tokens: Vec<TokenId>,
    pub dropped_utterances: usize,
    pub warnings: Vec<String>,
}

impl PreparedExample {
    pub fn placeholder(&self) -> &NodeSpec {
        self.nodes.last().expect("placeholder node")
    }

    pub fn gold_strategy(&self) -> Option<Strategy> {
        self.placeholder().strategy
    }

    pub fn has_target(&self) -> bool {
        !self.target_output.is_empty()
    }
}

pub fn utterance_keywords(u: &Utterance, tokens: &[TokenId], vocab: &Vocab, k: usize) -> Vec<TokenId> {
    match &u.keywords {
        Some(words) => words.iter().filter_map(|w| vocab.get(w)).collect(),
        None => vocab.tfidf_keywords(tokens, k),
    }
}

/// Fills missing keywords (train-fitted TF-IDF) and missing seeker emotions
/// (lexicon tagger).
pub fn annotate(dialogues: &[Dialogue], vocab: &Vocab, k: usize) -> Vec<Dialogue> {
    dialogues
        .iter()
        .map(|d| Dialogue {
            id: d.id.clone(),
            utterances: d
                .utterances
                .iter()
                .map(|u| {
                    let mut u = u.clone();
                    if u.keywords.is_none() {
                        let toks = vocab.tokenize(&u.text);
                        let kws = vocab.tfidf_keywords(&toks, k);
                        u.keywords = Some(kws.iter().map(|&t| vocab.token(t).to_string()).collect());
                    }
                    if u.speaker == Speaker::Seeker && u.emotion.is_none() {
                        u.emotion = Some(lexicon_emotion(&u.text));
                    }
                    u
                })
                .collect(),
        })
        .collect()
}

/// Prepares an example whose final utterance is the gold supporter response.
pub fn prepare_example(example: &Dialogue, vocab: &Vocab, opts: &PrepareOptions) -> Result<PreparedExample> {
    let (target, history) = example
        .utterances
        .split_last()
        .ok_or_else(|| Error::data(format!("{}: empty example", example.id)))?;
    if target.speaker != Speaker::Supporter {
        return Err(Error::data(format!("{}: target turn is not a supporter turn", example.id)));
    }
    if target.strategy.is_none() {
        return Err(Error::data(format!("{}: target turn has no strategy label", example.id)));
    }
    prepare_context(&example.id, history, Some(target), vocab, opts)
}

/// Prepares a history for generation; `target` may be absent at inference.
pub fn prepare_context(
    id: &str,
    history: &[Utterance],
    target: Option<&Utterance>,
    vocab: &Vocab,
    opts: &PrepareOptions,
) -> Result<PreparedExample> {
    if history.is_empty() {
        return Err(Error::data(format!("{id}: example has no history")));
    }
    let mut tokenized: Vec<Vec<TokenId>> = history.iter().map(|u| vocab.tokenize(&u.text)).collect();
    let mut warnings = Vec::new();

    // left-truncate: drop oldest utterances, then clip the oldest survivor's tokens
    let budget = opts.max_context_len.max(3);
    let total = |t: &[Vec<TokenId>]| t.iter().map(|u| u.len() + 1).sum::<usize>() + 1;
    let mut dropped = 0;
    while total(&tokenized[dropped..]) > budget && tokenized.len() - dropped > 1 {
        dropped += 1;
    }
    if dropped > 0 {
        warnings.push(format!("{id}: dropped {dropped} oldest utterances to fit {budget} tokens"));
    }
    let history = &history[dropped..];
    let mut tokenized = tokenized.split_off(dropped);
    let over = total(&tokenized).saturating_sub(budget);
    if over > 0 {
        tokenized[0].drain(..over);
        warnings.push(format!("{id}: clipped {over} tokens from the oldest utterance"));
    }

    let mut context = Vec::new();
    let mut cls_positions = Vec::with_capacity(history.len() + 1);
    for toks in &tokenized {
        cls_positions.push(context.len());
        context.push(CLS);
        context.extend_from_slice(toks);
    }
    cls_positions.push(context.len());
    context.push(CLS);

    let speakers: Vec<Speaker> = history.iter().map(|u| u.speaker).collect();
    let window = window_over(&speakers, opts.window);

    let target_tokens: Vec<TokenId> = target
        .map(|t| {
            let mut v = vocab.tokenize(&t.text);
            v.truncate(opts.max_target_len.saturating_sub(1).max(1));
            v
        })
        .unwrap_or_default();

    let mut nodes = Vec::with_capacity(window.len());
    for &(turn, speaker) in &window.node_turns {
        let node = if turn == history.len() {
            NodeSpec {
                turn,
                speaker,
                strategy: target.and_then(|t| t.strategy),
                emotion: None,
                keywords: target
                    .map(|t| utterance_keywords(t, &target_tokens, vocab, opts.keywords_k))
                    .unwrap_or_default(),
                placeholder: true,
            }
        } else {
            let u = &history[turn];
            let strategy = match (u.speaker, u.strategy) {
                (Speaker::Supporter, None) => {
                    return Err(Error::data(format!("{id}: supporter turn {turn} has no strategy label")))
                }
                (_, s) => s,
            };
            let emotion = match u.speaker {
                Speaker::Seeker => Some(u.emotion.unwrap_or_else(|| lexicon_emotion(&u.text))),
                Speaker::Supporter => None,
            };
            NodeSpec {
                turn,
                speaker,
                strategy,
                emotion,
                keywords: utterance_keywords(u, &tokenized[turn], vocab, opts.keywords_k),
                placeholder: false,
            }
        };
        nodes.push(node);
    }

    let mut target_input = vec![BOS];
    let mut target_output = Vec::new();
    if target.is_some() {
        target_input.extend_from_slice(&target_tokens);
        target_output.extend_from_slice(&target_tokens);
        target_output.push(EOS);
    }

    Ok(PreparedExample {
        id: id.to_string(),
        context,
        cls_positions,
        window,
        nodes,
        target_input,
        target_output,
        target_tokens,
        dropped_utterances: dropped,
        warnings,
    })
}
