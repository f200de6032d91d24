//! Fixtures and brute-force reference implementations shared by test targets.
#![allow(dead_code)]

use esc_core::corpus::{
    prepare_example, Dialogue, Emotion, PrepareOptions, PreparedExample, Speaker, Strategy, Utterance, Vocab,
    VocabOptions,
};
use esc_core::eval::GenerationConfig;
use esc_core::model::{ModelConfig, TransitionModel};
use esc_core::numerics::{Ctx, Graph, ParamStore, Tensor, Var};
use esc_core::training::total_loss;
use esc_core::transition_graph::TransitionGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GAMMA: [f64; 4] = [1.0, 0.2, 1.0, 1.0];

// ---------------------------------------------------------------- fixtures

/// 44 content words plus the six specials.
pub fn fifty_token_vocab() -> Vocab {
    let words: Vec<String> = (0..44).map(|i| format!("w{i}")).collect();
    let v = Vocab::fit_texts(words.iter().map(String::as_str), &VocabOptions::default());
    assert_eq!(v.len(), 50);
    v
}

fn words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| format!("w{}", rng.random_range(0..44))).collect::<Vec<_>>().join(" ")
}

/// History `[seeker, supporter, seeker]` and a supporter target: with w = 2
/// the window has four nodes and uses every edge type.
pub fn four_node_example(seed: u64) -> (Vocab, PreparedExample) {
    let vocab = fifty_token_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kw = |rng: &mut ChaCha8Rng| Some(vec![format!("w{}", rng.random_range(0..44)), format!("w{}", rng.random_range(0..44))]);
    let mut turns = vec![
        Utterance::seeker(words(&mut rng, 5)).with_emotion(Emotion::Sadness),
        Utterance::supporter(words(&mut rng, 4), Strategy::Question),
        Utterance::seeker(words(&mut rng, 6)).with_emotion(Emotion::Fear),
        Utterance::supporter(words(&mut rng, 5), Strategy::ReflectionOfFeelings),
    ];
    for u in &mut turns {
        u.keywords = kw(&mut rng);
    }
    let d = Dialogue { id: format!("grad-{seed}"), utterances: turns };
    let ex = prepare_example(&d, &vocab, &PrepareOptions::default()).unwrap();
    assert_eq!(ex.nodes.len(), 4);
    (vocab, ex)
}

pub fn tiny_model(vocab: usize, seed: u64) -> TransitionModel {
    let mut cfg = ModelConfig::tiny(vocab);
    cfg.seed = seed;
    TransitionModel::new(cfg).unwrap()
}

/// γ-weighted loss of one example, no dropout.
pub fn full_loss(model: &TransitionModel, ex: &PreparedExample) -> f64 {
    let graph = Graph::new();
    let cx = model.ctx(&graph);
    let (_, parts) = model.losses(&cx, ex).unwrap();
    total_loss(&parts, &GAMMA).unwrap().item()
}

pub fn full_grads(model: &TransitionModel, ex: &PreparedExample) -> Vec<Tensor> {
    let graph = Graph::new();
    let cx = model.ctx(&graph);
    let (_, parts) = model.losses(&cx, ex).unwrap();
    graph.backward(total_loss(&parts, &GAMMA).unwrap()).unwrap();
    let mut out: Vec<Tensor> = model.params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
    for (id, g) in graph.param_grads() {
        out[id.index()] = g;
    }
    out
}

pub fn central_difference(model: &mut TransitionModel, ex: &PreparedExample, name: &str, k: usize, h: f64) -> f64 {
    let id = model.params.id(name).unwrap();
    let orig = model.params.get(id).data()[k];
    model.params.get_mut(id).data_mut()[k] = orig + h;
    let up = full_loss(model, ex);
    model.params.get_mut(id).data_mut()[k] = orig - h;
    let down = full_loss(model, ex);
    model.params.get_mut(id).data_mut()[k] = orig;
    (up - down) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// Largest mismatch between analytic and central-difference gradients of
/// `sum(f(inputs) * w)` for a fixed random `w`, over every input entry and
/// every parameter entry. Entries are compared as `|a - n| / (1e-5 + max(|a|, |n|))`;
/// the floor absorbs rounding noise on exactly-zero gradients such as key biases.
pub fn layer_gradcheck<F>(store: &mut ParamStore, inputs: &[Tensor], f: F) -> f64
where
    F: for<'a> Fn(&Ctx<'a>, &[Var<'a>]) -> Var<'a>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let graph = Graph::new();
        let cx = Ctx::new(&graph, store);
        let xs: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
        let out = f(&cx, &xs);
        projection_loss(&graph, out).item()
    };
    let (input_grads, param_grads) = {
        let graph = Graph::new();
        let cx = Ctx::new(&graph, store);
        let xs: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
        let out = f(&cx, &xs);
        graph.backward(projection_loss(&graph, out)).unwrap();
        let ig: Vec<Tensor> = xs
            .iter()
            .zip(inputs)
            .map(|(x, t)| graph.grad(*x).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let mut pg: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        for (id, g) in graph.param_grads() {
            pg[id.index()] = g;
        }
        (ig, pg)
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    let cmp = |a: f64, n: f64| (a - n).abs() / (1e-5 + a.abs().max(n.abs()));
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for k in 0..xs[i].numel() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + h;
            let up = eval(store, &xs);
            xs[i].data_mut()[k] = orig - h;
            let down = eval(store, &xs);
            xs[i].data_mut()[k] = orig;
            worst = worst.max(cmp(input_grads[i].data()[k], (up - down) / (2.0 * h)));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(store, inputs);
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(store, inputs);
            store.get_mut(id).data_mut()[k] = orig;
            worst = worst.max(cmp(param_grads[id.index()].data()[k], (up - down) / (2.0 * h)));
        }
    }
    worst
}

fn projection_loss<'a>(graph: &'a Graph, out: Var<'a>) -> Var<'a> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n: usize = out.shape().iter().product();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = graph.constant(Tensor::new(out.shape(), w).unwrap());
    out.mul(w).unwrap().sum()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_speakers(rng: &mut ChaCha8Rng, n: usize) -> Vec<Speaker> {
    (0..n)
        .map(|_| if rng.random_bool(0.5) { Speaker::Seeker } else { Speaker::Supporter })
        .collect()
}

// ------------------------------------------------------------ graph oracle

/// States a node holds: (semantics, strategy, emotion).
fn states_of(speaker: Speaker) -> [bool; 3] {
    match speaker {
        Speaker::Seeker => [true, false, true],
        Speaker::Supporter => [true, true, false],
    }
}

fn state_slot(short: &str) -> usize {
    match short {
        "sem" => 0,
        "strat" => 1,
        "emo" => 2,
        other => panic!("unknown state {other}"),
    }
}

/// Edge-type names applicable from a node with `src` to a node with `dst`,
/// read off the `x_to_y` naming rather than the type's own accessors.
pub fn applicable_types(src: Speaker, dst: Speaker) -> Vec<&'static str> {
    let (s, d) = (states_of(src), states_of(dst));
    let mut out: Vec<&'static str> = esc_core::transition_graph::EdgeType::ALL
        .iter()
        .map(|e| e.name())
        .filter(|name| {
            let (a, b) = name.split_once("_to_").unwrap();
            s[state_slot(a)] && d[state_slot(b)]
        })
        .collect();
    out.sort();
    out
}

/// Every mismatch between `graph` and the all-previous-nodes rule.
pub fn graph_violations(graph: &TransitionGraph) -> Vec<String> {
    let mut bad = Vec::new();
    for e in &graph.edges {
        if e.src >= e.dst {
            bad.push(format!("edge {}->{} is not backward", e.src, e.dst));
        }
    }
    for dst in 0..graph.len() {
        for src in 0..graph.len() {
            let mut got: Vec<&str> = graph
                .edges
                .iter()
                .filter(|e| e.src == src && e.dst == dst)
                .map(|e| e.kind.name())
                .collect();
            got.sort();
            let want = if src < dst {
                applicable_types(graph.nodes[src].speaker, graph.nodes[dst].speaker)
            } else {
                Vec::new()
            };
            if got != want {
                bad.push(format!("{src}->{dst}: got {got:?}, want {want:?}"));
            }
        }
    }
    bad
}

// ----------------------------------------------------------- window oracle

/// Start of the transition window by a backward scan.
pub fn window_start_oracle(history: &[Speaker], w: usize) -> usize {
    let mut seen = 0;
    for i in (0..history.len()).rev() {
        if history[i] == Speaker::Supporter {
            seen += 1;
            if seen == w {
                return i;
            }
        }
    }
    0
}

// ----------------------------------------------------------- metric oracles

fn ngrams<T: Clone>(s: &[T], n: usize) -> Vec<Vec<T>> {
    if n == 0 || s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn count<T: PartialEq>(haystack: &[Vec<T>], g: &[T]) -> usize {
    haystack.iter().filter(|h| h.as_slice() == g).count()
}

fn unique<T: PartialEq + Clone>(items: &[Vec<T>]) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = Vec::new();
    for it in items {
        if !out.contains(it) {
            out.push(it.clone());
        }
    }
    out
}

/// Corpus BLEU with clipped counts computed by linear scans.
pub fn bleu_oracle<T: PartialEq + Clone>(cands: &[Vec<T>], refs: &[Vec<T>], n: usize) -> f64 {
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let r_len: usize = refs.iter().map(Vec::len).sum();
    if c_len == 0 {
        return 0.0;
    }
    let mut logp = Vec::new();
    for k in 1..=n {
        let mut clipped = 0;
        let mut total = 0;
        for (c, r) in cands.iter().zip(refs) {
            let cg = ngrams(c, k);
            let rg = ngrams(r, k);
            total += cg.len();
            for g in unique(&cg) {
                clipped += count(&cg, &g).min(count(&rg, &g));
            }
        }
        let p = if clipped == 0 { 1e-9 } else { clipped as f64 / total as f64 };
        logp.push(p.ln());
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    bp * (logp.iter().sum::<f64>() / n as f64).exp()
}

fn is_subsequence<T: PartialEq>(sub: &[T], seq: &[T]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

/// ROUGE-L with the LCS found by enumerating candidate subsequences.
pub fn rouge_oracle<T: PartialEq + Clone>(cand: &[T], reference: &[T], beta: f64) -> f64 {
    assert!(cand.len() <= 16);
    let mut lcs = 0;
    for mask in 0u32..(1 << cand.len()) {
        let sub: Vec<T> = (0..cand.len()).filter(|i| mask >> i & 1 == 1).map(|i| cand[i].clone()).collect();
        if sub.len() > lcs && is_subsequence(&sub, reference) {
            lcs = sub.len();
        }
    }
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    (1.0 + beta * beta) * p * r / (r + beta * beta * p)
}

pub fn distinct_oracle<T: PartialEq + Clone>(corpus: &[Vec<T>], n: usize) -> f64 {
    let all: Vec<Vec<T>> = corpus.iter().flat_map(|s| ngrams(s, n)).collect();
    if all.is_empty() {
        0.0
    } else {
        unique(&all).len() as f64 / all.len() as f64
    }
}

// ---------------------------------------------------------- sampler oracle

/// Filtered distribution computed from the full softmax: penalty, temperature,
/// keep the `k` most probable (lower id first on ties), renormalize, keep the
/// smallest prefix reaching mass `p`, renormalize.
pub fn support_oracle(logits: &[f64], history: &[usize], cfg: &GenerationConfig) -> Vec<(usize, f64)> {
    let mut z = logits.to_vec();
    for (t, v) in z.iter_mut().enumerate() {
        if history.contains(&t) {
            *v = if *v > 0.0 { *v / cfg.repetition_penalty } else { *v * cfg.repetition_penalty };
        }
        *v /= cfg.temperature;
    }
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let probs: Vec<f64> = e.iter().map(|v| v / s).collect();
    let mut ranked: Vec<usize> = (0..z.len()).collect();
    // selection by repeated argmax
    let mut order = Vec::new();
    while !ranked.is_empty() && order.len() < cfg.top_k {
        let mut best = 0;
        for j in 1..ranked.len() {
            if z[ranked[j]] > z[ranked[best]] {
                best = j;
            }
        }
        order.push(ranked.remove(best));
    }
    let mass: f64 = order.iter().map(|&t| probs[t]).sum();
    let mut kept = Vec::new();
    let mut acc = 0.0;
    for &t in &order {
        let p = probs[t] / mass;
        kept.push((t, p));
        acc += p;
        if acc >= cfg.top_p - 1e-12 {
            break;
        }
    }
    let total: f64 = kept.iter().map(|x| x.1).sum();
    kept.into_iter().map(|(t, p)| (t, p / total)).collect()
}
