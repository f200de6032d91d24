//! Keyword-lexicon emotion tagger for seeker turns without a label.

use crate::corpus::vocab::normalize_words;
use crate::corpus::Emotion;

const LEXICON: &[(&str, Emotion)] = &[
    ("happy", Emotion::Joy),
    ("glad", Emotion::Joy),
    ("great", Emotion::Joy),
    ("better", Emotion::Joy),
    ("thanks", Emotion::Joy),
    ("thank", Emotion::Joy),
    ("excited", Emotion::Joy),
    ("relieved", Emotion::Joy),
    ("angry", Emotion::Anger),
    ("mad", Emotion::Anger),
    ("furious", Emotion::Anger),
    ("annoyed", Emotion::Anger),
    ("frustrated", Emotion::Anger),
    ("hate", Emotion::Anger),
    ("unfair", Emotion::Anger),
    ("sad", Emotion::Sadness),
    ("depressed", Emotion::Sadness),
    ("lonely", Emotion::Sadness),
    ("cry", Emotion::Sadness),
    ("crying", Emotion::Sadness),
    ("lost", Emotion::Sadness),
    ("miss", Emotion::Sadness),
    ("hopeless", Emotion::Sadness),
    ("down", Emotion::Sadness),
    ("afraid", Emotion::Fear),
    ("scared", Emotion::Fear),
    ("anxious", Emotion::Fear),
    ("anxiety", Emotion::Fear),
    ("worried", Emotion::Fear),
    ("nervous", Emotion::Fear),
    ("panic", Emotion::Fear),
    ("stressed", Emotion::Fear),
    ("disgusted", Emotion::Disgust),
    ("gross", Emotion::Disgust),
    ("sick", Emotion::Disgust),
    ("awful", Emotion::Disgust),
];

/// Most frequent lexicon emotion in `text`; earlier taxonomy entries win
/// ties; `Neutral` when nothing matches.
pub fn lexicon_emotion(text: &str) -> Emotion {
    let mut counts = [0usize; Emotion::COUNT];
    for w in normalize_words(text) {
        if let Some((_, e)) = LEXICON.iter().find(|(k, _)| *k == w) {
            counts[e.index()] += 1;
        }
    }
    let best = (0..Emotion::COUNT).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)));
    match best {
        Some(i) if counts[i] > 0 => Emotion::ALL[i],
        _ => Emotion::Neutral,
    }
}
