use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Speaker};
use crate::error::{Error, Result};

pub const MAX_EXAMPLE_UTTERANCES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Segmentation {
    /// Consecutive, non-overlapping chunks of at most `max_len` utterances,
    /// each cut back to its last supporter turn.
    #[default]
    NonOverlapping,
    /// One example per supporter turn, with the preceding context clipped so
    /// the example holds at most `max_len` utterances.
    PerResponse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Consecutive chunks of at most `max_len` utterances.
pub fn segment(dialogue: &Dialogue, max_len: usize) -> Vec<Dialogue> {
    if dialogue.utterances.len() <= max_len {
        return vec![dialogue.clone()];
    }
    dialogue
        .utterances
        .chunks(max_len.max(1))
        .enumerate()
        .map(|(k, c)| Dialogue {
            id: format!("{}#{k}", dialogue.id),
            utterances: c.to_vec(),
        })
        .collect()
}

/// Drops trailing turns after the last supporter utterance. Returns `None`
/// when no supporter turn with at least one preceding utterance exists.
pub fn align_target(mut example: Dialogue) -> Option<Dialogue> {
    let last = example
        .utterances
        .iter()
        .rposition(|u| u.speaker == Speaker::Supporter)?;
    if last == 0 {
        return None;
    }
    example.utterances.truncate(last + 1);
    Some(example)
}

pub fn make_examples(dialogues: &[Dialogue], mode: Segmentation, max_len: usize) -> Vec<Dialogue> {
    let mut out = Vec::new();
    for d in dialogues {
        match mode {
            Segmentation::NonOverlapping => {
                out.extend(segment(d, max_len).into_iter().filter_map(align_target));
            }
            Segmentation::PerResponse => {
                for (i, u) in d.utterances.iter().enumerate() {
                    if u.speaker != Speaker::Supporter || i == 0 {
                        continue;
                    }
                    let start = (i + 1).saturating_sub(max_len);
                    out.push(Dialogue {
                        id: format!("{}@{i}", d.id),
                        utterances: d.utterances[start..=i].to_vec(),
                    });
                }
            }
        }
    }
    out
}

/// Split sizes by largest remainder; leftover units go to the parts with
/// the largest fractional share, earlier parts first on ties.
pub fn split_sizes(n: usize, ratio: &[u32]) -> Vec<usize> {
    let total: u64 = ratio.iter().map(|&r| r as u64).sum();
    if total == 0 {
        return vec![0; ratio.len()];
    }
    let exact: Vec<(u64, u64)> = ratio
        .iter()
        .map(|&r| {
            let num = n as u64 * r as u64;
            (num / total, num % total)
        })
        .collect();
    let mut sizes: Vec<usize> = exact.iter().map(|&(q, _)| q as usize).collect();
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratio.len()).collect();
    order.sort_by(|&a, &b| exact[b].1.cmp(&exact[a].1).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Segments dialogues into examples, shuffles them with `seed`, and splits
/// by `ratio` (train:dev:test).
pub fn truncate_and_split(
    dialogues: &[Dialogue],
    seed: u64,
    ratio: [u32; 3],
    mode: Segmentation,
) -> Result<Split> {
    if dialogues.is_empty() {
        return Err(Error::data("cannot split an empty dataset"));
    }
    let mut examples = make_examples(dialogues, mode, MAX_EXAMPLE_UTTERANCES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples.shuffle(&mut rng);
    let sizes = split_sizes(examples.len(), &ratio);
    let test = examples.split_off(sizes[0] + sizes[1]);
    let dev = examples.split_off(sizes[0]);
    Ok(Split { train: examples, dev, test })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub avg_words_per_utterance: f64,
    pub avg_turns_per_dialogue: f64,
    pub avg_words_per_dialogue: f64,
}

pub fn corpus_stats(dialogues: &[Dialogue]) -> CorpusStats {
    let n = dialogues.len().max(1) as f64;
    let utts: usize = dialogues.iter().map(|d| d.utterances.len()).sum();
    let words: usize = dialogues
        .iter()
        .flat_map(|d| &d.utterances)
        .map(|u| u.text.split_whitespace().count())
        .sum();
    CorpusStats {
        dialogues: dialogues.len(),
        avg_words_per_utterance: words as f64 / utts.max(1) as f64,
        avg_turns_per_dialogue: utts as f64 / n,
        avg_words_per_dialogue: words as f64 / n,
    }
}
