//! Word-level tokenizer, vocabulary, and TF-IDF keyword scoring.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Dialogue;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const CLS: TokenId = 4;
pub const SEP: TokenId = 5;

const SPECIALS: [&str; 6] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[CLS]", "[SEP]"];

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "d", "did", "do", "does", "doing", "don", "down", "during", "each",
    "few", "for", "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers",
    "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its",
    "itself", "just", "ll", "m", "me", "more", "most", "my", "myself", "no", "nor", "not", "now",
    "of", "off", "on", "once", "only", "or", "other", "our", "ours", "ourselves", "out", "over",
    "own", "re", "s", "same", "she", "should", "so", "some", "such", "t", "than", "that", "the",
    "their", "theirs", "them", "themselves", "then", "there", "these", "they", "this", "those",
    "through", "to", "too", "under", "until", "up", "ve", "very", "was", "we", "were", "what",
    "when", "where", "which", "while", "who", "whom", "why", "will", "with", "would", "you",
    "your", "yours", "yourself", "yourselves",
];

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.binary_search(&word).is_ok()
}

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes its own token.
pub fn normalize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Canonical text form: normalized words joined by single spaces.
pub fn normalize_text(text: &str) -> String {
    normalize_words(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabOptions {
    pub min_count: usize,
    pub max_size: Option<usize>,
    pub filter_stopwords: bool,
}

impl Default for VocabOptions {
    fn default() -> Self {
        VocabOptions {
            min_count: 1,
            max_size: None,
            filter_stopwords: true,
        }
    }
}

/// Token table plus inverse document frequencies fitted on one corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    idf: Vec<f64>,
    documents: usize,
    filter_stopwords: bool,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Fits tokens and IDF on the utterances of `dialogues` (one utterance = one document).
    pub fn fit(dialogues: &[Dialogue], opts: &VocabOptions) -> Vocab {
        let texts = dialogues.iter().flat_map(|d| d.utterances.iter().map(|u| u.text.as_str()));
        Self::fit_texts(texts, opts)
    }

    pub fn fit_texts<'s>(texts: impl IntoIterator<Item = &'s str>, opts: &VocabOptions) -> Vocab {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut documents = 0;
        for text in texts {
            documents += 1;
            let words = normalize_words(text);
            let uniq: HashSet<&String> = words.iter().collect();
            for w in uniq {
                *df.entry(w.clone()).or_default() += 1;
            }
            for w in words {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= opts.min_count && !SPECIALS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(max) = opts.max_size {
            words.truncate(max.saturating_sub(SPECIALS.len()));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut idf = vec![0.0; SPECIALS.len()];
        for (w, _) in words {
            let d = df.get(&w).copied().unwrap_or(0).max(1);
            idf.push((documents.max(1) as f64 / d as f64).ln().max(0.0));
            tokens.push(w);
        }
        let mut v = Vocab {
            tokens,
            idf,
            documents,
            filter_stopwords: opts.filter_stopwords,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    /// Restores the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= SPECIALS.len()
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn idf(&self, id: TokenId) -> f64 {
        self.idf.get(id).copied().unwrap_or(0.0)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < SPECIALS.len()
    }

    /// Eligible for keyword extraction: not special, not punctuation, not a stopword.
    pub fn is_content(&self, id: TokenId) -> bool {
        if self.is_special(id) || id >= self.tokens.len() {
            return false;
        }
        let t = &self.tokens[id];
        t.chars().any(char::is_alphanumeric) && !(self.filter_stopwords && is_stopword(t))
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        normalize_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Inverse of [`Vocab::tokenize`] on in-vocabulary text; specials other than UNK are dropped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| i == UNK || !self.is_special(i))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The `k` highest tf-idf content tokens of an utterance, best first.
    /// `tf = count / len(tokens)`, ties broken by the lower token id.
    pub fn tfidf_keywords(&self, tokens: &[TokenId], k: usize) -> Vec<TokenId> {
        let mut ranked = self.tfidf_scores(tokens);
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.into_iter().take(k).map(|(id, _)| id).collect()
    }

    /// `(token, tf * idf)` for every distinct content token, in id order.
    pub fn tfidf_scores(&self, tokens: &[TokenId]) -> Vec<(TokenId, f64)> {
        if tokens.is_empty() {
            return Vec::new();
        }
        let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
        for &t in tokens.iter().filter(|&&t| self.is_content(t)) {
            *counts.entry(t).or_default() += 1;
        }
        let len = tokens.len() as f64;
        counts
            .into_iter()
            .map(|(t, c)| (t, c as f64 / len * self.idf(t)))
            .collect()
    }

    /// Stable content hash, used to key preprocessing caches.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (t, idf) in self.tokens.iter().zip(&self.idf) {
            h.update(t.as_bytes());
            h.update([0u8]);
            h.update(idf.to_le_bytes());
        }
        h.update((self.filter_stopwords as u8).to_le_bytes());
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
