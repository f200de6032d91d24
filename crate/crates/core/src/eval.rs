//! Sampling-based generation and automatic metrics.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{TokenId, BOS, CLS, EOS, PAD};
use crate::corpus::{PreparedExample, Strategy, Vocab};
use crate::error::{Error, Result};
use crate::model::TransitionModel;
use crate::numerics::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Nucleus mass; 1.0 disables the filter.
    pub top_p: f64,
    /// Candidates kept by logit; a value at least the vocabulary size disables the filter.
    pub top_k: usize,
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            top_p: 0.3,
            top_k: 30,
            temperature: 0.7,
            repetition_penalty: 1.03,
            max_new_tokens: 40,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("top_p must lie in (0, 1]"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::config("repetition_penalty must be at least 1"));
        }
        Ok(())
    }
}

/// Divides positive and multiplies negative logits of every token seen in `history`.
pub fn apply_repetition_penalty(logits: &mut [f64], history: &[TokenId], penalty: f64) {
    let seen: HashSet<TokenId> = history.iter().copied().collect();
    for t in seen {
        if let Some(l) = logits.get_mut(t) {
            *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
        }
    }
}

/// The sampling support after penalty, temperature, top-k and top-p, as
/// `(token, probability)` in decreasing order; equal logits rank the lower id first.
pub fn sampling_support(logits: &[f64], history: &[TokenId], cfg: &GenerationConfig) -> Result<Vec<(TokenId, f64)>> {
    if logits.is_empty() {
        return Err(Error::contract("empty logit vector"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::contract("logits must be finite"));
    }
    let mut z = logits.to_vec();
    apply_repetition_penalty(&mut z, history, cfg.repetition_penalty);
    for v in z.iter_mut() {
        *v /= cfg.temperature;
    }
    let mut order: Vec<TokenId> = (0..z.len()).collect();
    // partial_cmp, so that -0.0 and 0.0 tie
    order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).expect("finite").then(a.cmp(&b)));
    order.truncate(cfg.top_k.min(z.len()));

    let m = z[order[0]];
    let weights: Vec<f64> = order.iter().map(|&t| (z[t] - m).exp()).collect();
    let norm: f64 = weights.iter().sum();
    let mut support = Vec::new();
    let mut mass = 0.0;
    for (&t, w) in order.iter().zip(&weights) {
        let p = w / norm;
        support.push((t, p));
        mass += p;
        if mass >= cfg.top_p - 1e-12 {
            break;
        }
    }
    let kept: f64 = support.iter().map(|(_, p)| p).sum();
    for (_, p) in support.iter_mut() {
        *p /= kept;
    }
    Ok(support)
}

pub fn sample_next(logits: &[f64], history: &[TokenId], cfg: &GenerationConfig, rng: &mut impl Rng) -> Result<TokenId> {
    let support = sampling_support(logits, history, cfg)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(t, p) in &support {
        acc += p;
        if u < acc {
            return Ok(t);
        }
    }
    Ok(support.last().expect("support is never empty").0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated tokens without BOS and EOS.
    pub tokens: Vec<TokenId>,
    pub strategy_probs: Vec<f64>,
}

/// Autoregressive sampling of a response. The repetition penalty looks at
/// the tokens generated so far.
pub fn generate(model: &TransitionModel, ex: &PreparedExample, cfg: &GenerationConfig, rng: &mut impl Rng) -> Result<Generation> {
    cfg.validate()?;
    let graph = Graph::new();
    let cx = model.ctx(&graph);
    let side = model.context_side(&cx, ex, false)?;
    let strategy_probs = side.strategy_distribution();
    let limit = cfg.max_new_tokens.min(model.decoder.max_len().saturating_sub(1));
    let mut input = vec![BOS];
    let mut tokens = Vec::new();
    while tokens.len() < limit {
        let logits = model.decode(&cx, &side, &input)?.value();
        let next = sample_next(logits.row(logits.rows() - 1), &tokens, cfg, rng)?;
        if next == EOS {
            break;
        }
        tokens.push(next);
        input.push(next);
    }
    Ok(Generation { tokens, strategy_probs })
}

/// `exp` of the mean per-token negative log-likelihood over every non-PAD gold token.
pub fn perplexity(model: &TransitionModel, examples: &[PreparedExample]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for ex in examples.iter().filter(|e| e.has_target()) {
        let graph = Graph::new();
        let cx = model.ctx(&graph);
        let (_, parts) = model.losses(&cx, ex)?;
        let n = ex.target_output.iter().filter(|&&t| t != PAD).count();
        nll += parts.generation.item() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::contract("perplexity over zero tokens"));
    }
    Ok((nll / count as f64).exp())
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

pub const BLEU_EPSILON: f64 = 1e-9;

/// Corpus BLEU up to order `n` with uniform weights and brevity penalty;
/// zero precisions are replaced by a tiny epsilon.
pub fn corpus_bleu<T: Eq + Hash + Clone>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if !(1..=4).contains(&n) {
        return Err(Error::contract(format!("BLEU order {n} outside 1..=4")));
    }
    let c_len: usize = candidates.iter().map(Vec::len).sum();
    let r_len: usize = references.iter().map(Vec::len).sum();
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut clipped, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let rc = ngram_counts(r, k);
            for (g, cnt) in ngram_counts(c, k) {
                clipped += cnt.min(rc.get(&g).copied().unwrap_or(0));
                total += cnt;
            }
        }
        let p = if total == 0 || clipped == 0 {
            BLEU_EPSILON
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

pub fn bleu_n<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    corpus_bleu(&[candidate.to_vec()], &[reference.to_vec()], n)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Unique over total n-grams across the whole corpus.
pub fn distinct_n<T: Eq + Hash + Clone>(corpus: &[Vec<T>], n: usize) -> f64 {
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for s in corpus {
        if n > 0 && s.len() >= n {
            for w in s.windows(n) {
                unique.insert(w.to_vec());
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Rank of `gold` when sorting by decreasing probability, lower index first on ties.
fn gold_rank(probs: &[f64], gold: usize) -> usize {
    let g = probs[gold];
    (0..probs.len()).filter(|&i| probs[i] > g || (probs[i] == g && i < gold)).count()
}

/// Fraction of examples whose gold strategy is among the `n` most probable.
pub fn strategy_accuracy(predictions: &[Vec<f64>], golds: &[Strategy], n: usize) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} predictions but {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (p, g) in predictions.iter().zip(golds) {
        if p.len() != Strategy::COUNT {
            return Err(Error::dim(format!("strategy distribution of length {}", p.len())));
        }
        if gold_rank(p, g.index()) < n {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ppl: f64,
    pub b2: f64,
    pub b4: f64,
    pub rl: f64,
    pub d1: f64,
    pub d2: f64,
    pub acc: f64,
    /// Top-n strategy accuracy for n = 1..=8.
    pub acc_top_n: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub dialogue_id: String,
    pub context: Vec<String>,
    pub gold: String,
    pub generated: String,
    pub predicted_strategy: Strategy,
    pub gold_strategy: Option<Strategy>,
}

/// Utterances of a prepared context, CLS markers removed.
pub fn context_utterances(ex: &PreparedExample, vocab: &Vocab) -> Vec<String> {
    ex.context
        .split(|&t| t == CLS)
        .skip(1)
        .take(ex.cls_positions.len().saturating_sub(1))
        .map(|u| vocab.detokenize(u))
        .collect()
}

/// Generates for every example and scores the whole set. Example `i` samples
/// from its own random stream `(seed, i)`.
pub fn evaluate(
    model: &TransitionModel,
    vocab: &Vocab,
    examples: &[PreparedExample],
    cfg: &GenerationConfig,
) -> Result<(MetricReport, Vec<GenerationRecord>)> {
    let all = examples;
    let examples: Vec<&PreparedExample> = all.iter().filter(|e| e.has_target()).collect();
    if examples.is_empty() {
        return Err(Error::contract("evaluation over zero examples"));
    }
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    let mut probs = Vec::new();
    let mut golds = Vec::new();
    let mut records = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let g = generate(model, ex, cfg, &mut rng)?;
        let predicted = Strategy::ALL[crate::model::argmax(&g.strategy_probs)];
        records.push(GenerationRecord {
            dialogue_id: ex.id.clone(),
            context: context_utterances(ex, vocab),
            gold: vocab.detokenize(&ex.target_tokens),
            generated: vocab.detokenize(&g.tokens),
            predicted_strategy: predicted,
            gold_strategy: ex.gold_strategy(),
        });
        if let Some(s) = ex.gold_strategy() {
            probs.push(g.strategy_probs.clone());
            golds.push(s);
        }
        cands.push(g.tokens);
        refs.push(ex.target_tokens.clone());
    }
    let acc_top_n = (1..=Strategy::COUNT)
        .map(|n| strategy_accuracy(&probs, &golds, n))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport {
        ppl: perplexity(model, all)?,
        b2: corpus_bleu(&cands, &refs, 2)?,
        b4: corpus_bleu(&cands, &refs, 4)?,
        rl: cands.iter().zip(&refs).map(|(c, r)| rouge_l(c, r, ROUGE_BETA)).sum::<f64>() / cands.len() as f64,
        d1: distinct_n(&cands, 1),
        d2: distinct_n(&cands, 2),
        acc: acc_top_n[0],
        acc_top_n,
        count: examples.len(),
    };
    Ok((report, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(p: f64, k: usize) -> GenerationConfig {
        GenerationConfig {
            top_p: p,
            top_k: k,
            temperature: 1.0,
            repetition_penalty: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn nucleus_keeps_dominant_token() {
        let logits: Vec<f64> = [0.7f64, 0.2, 0.1].iter().map(|p| p.ln()).collect();
        let s = sampling_support(&logits, &[], &cfg(0.3, 30)).unwrap();
        assert_eq!(s, vec![(0, 1.0)]);
    }

    #[test]
    fn signed_zeros_tie() {
        let s = sampling_support(&[-3.0, -0.0, 0.0, -1.0], &[], &cfg(0.9, 2)).unwrap();
        assert_eq!(s.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn uniform_needs_two_tokens() {
        let s = sampling_support(&[0.0; 4], &[], &cfg(0.3, 30)).unwrap();
        assert_eq!(s.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!(s.iter().all(|x| (x.1 - 0.5).abs() < 1e-12));
    }

    #[test]
    fn penalty_divides_positive_multiplies_negative() {
        let mut l = vec![2.0, -1.0, 3.0];
        apply_repetition_penalty(&mut l, &[0, 1, 0], 1.03);
        assert_eq!(l, vec![2.0 / 1.03, -1.03, 3.0]);
    }

    #[test]
    fn bleu_hand_case() {
        let b = bleu_n(&["the", "cat", "sat"], &["the", "cat", "ran"], 2).unwrap();
        assert!((b - (2.0f64 / 3.0 * 0.5).sqrt()).abs() < 1e-12);
        assert_eq!(bleu_n::<&str>(&[], &["a"], 2).unwrap(), 0.0);
        assert!((bleu_n(&[1, 2, 3, 4], &[1, 2, 3, 4], 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_hand_case() {
        let f = rouge_l(&["a", "b", "c", "d"], &["a", "c", "d"], ROUGE_BETA);
        let (p, r, b2) = (0.75, 1.0, 1.44);
        assert!((f - (1.0 + b2) * p * r / (r + b2 * p)).abs() < 1e-12);
        assert_eq!(rouge_l(&["x"], &["y"], ROUGE_BETA), 0.0);
    }

    #[test]
    fn distinct_counts() {
        assert!((distinct_n(&[vec!["a", "b", "a"]], 1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((distinct_n(&[vec![7; 5]], 1) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn top_n_accuracy() {
        let p = |g: usize| {
            let mut v = vec![0.1; 8];
            v[g] = 0.3;
            v
        };
        let preds = vec![p(0), p(1), p(2), p(3)];
        let golds = [Strategy::Question, Strategy::Others, Strategy::from_index(2).unwrap(), Strategy::Information];
        assert_eq!(strategy_accuracy(&preds, &golds, 1).unwrap(), 0.5);
        assert_eq!(strategy_accuracy(&preds, &golds, 8).unwrap(), 1.0);
    }
}
