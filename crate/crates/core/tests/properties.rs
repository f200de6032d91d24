mod common;

use common::*;
use esc_core::corpus::preprocess::split_sizes;
use esc_core::corpus::{window_over, Speaker, Strategy as Label};
use esc_core::eval::{
    bleu_n, corpus_bleu, distinct_n, rouge_l, sampling_support, strategy_accuracy, GenerationConfig, ROUGE_BETA,
};
use esc_core::model::{CheckpointMeta, TransitionModel};
use esc_core::numerics::checkpoint::{read_tensors, write_tensors};
use esc_core::numerics::{Ctx, GatedFusion, Graph, Init, ParamStore, Tensor};
use esc_core::transition_graph::{init_states, StateKind, TransitionGraph, TransitionNetwork};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn speakers() -> impl Strategy<Value = Vec<Speaker>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { Speaker::Seeker } else { Speaker::Supporter }), 0..10)
}

fn tokens() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 1..9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, cols in 1usize..7, shift in -50.0f64..50.0,
                                      data in prop::collection::vec(-30.0f64..30.0, 24)) {
        let graph = Graph::new();
        let x = Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap();
        let shifted = Tensor::new(vec![rows, cols], x.data().iter().map(|v| v + shift).collect()).unwrap();
        let p = graph.constant(x).softmax().unwrap().value();
        let q = graph.constant(shifted).softmax().unwrap().value();
        for r in 0..rows {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|v| (0.0..=1.0).contains(v)));
            for (a, b) in p.row(r).iter().zip(q.row(r)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tensor_file_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..3), 1..4),
                              seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors: Vec<Tensor> = shapes.iter().map(|s| {
            let t = random_tensor(&mut rng, s, 100.0);
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| *v as f32 as f64).collect()).unwrap()
        }).collect();
        let entries: Vec<(String, &Tensor)> = tensors.iter().enumerate().map(|(i, t)| (format!("t{i}"), t)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        write_tensors(&path, &entries).unwrap();
        let back = read_tensors(&path).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for ((name, t), (want_name, want)) in back.iter().zip(&entries) {
            prop_assert_eq!(name, want_name);
            prop_assert_eq!(t, *want);
        }
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval(seed in 0u64..1000, rows in 1usize..4) {
        let mut store = ParamStore::new();
        let gate = GatedFusion::new(&mut store, &mut Init::new(seed), "g", 4).unwrap();
        let graph = Graph::new();
        let cx = Ctx::new(&graph, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = graph.constant(random_tensor(&mut rng, &[rows, 4], 3.0));
        let b = graph.constant(random_tensor(&mut rng, &[rows, 4], 3.0));
        let (out, g) = gate.fuse(&cx, a, b).unwrap();
        let (o, g, a, b) = (out.value(), g.value(), a.value(), b.value());
        for i in 0..g.numel() {
            let gi = g.data()[i];
            prop_assert!(gi > 0.0 && gi < 1.0);
            let (lo, hi) = (a.data()[i].min(b.data()[i]), a.data()[i].max(b.data()[i]));
            prop_assert!(o.data()[i] >= lo - 1e-12 && o.data()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn later_nodes_never_change_earlier_states(history in speakers(), seed in 0u64..1000, pick in any::<prop::sample::Index>()) {
        let g = TransitionGraph::from_speakers(&history);
        let j = pick.index(g.len());
        let d = 4;
        let mut store = ParamStore::new();
        let net = TransitionNetwork::new(&mut store, &mut Init::new(seed), d, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cls = random_tensor(&mut rng, &[g.len(), d], 1.0);
        let seekers = g.nodes_with(StateKind::Emotion).len();
        let csk = random_tensor(&mut rng, &[seekers.max(1), d], 1.0);
        let mut bumped = cls.clone();
        for c in 0..d {
            bumped.data_mut()[j * d + c] += 0.5;
        }
        let run = |cls: &Tensor| {
            let graph = Graph::new();
            let cx = Ctx::new(&graph, &store);
            let k = (seekers > 0).then(|| graph.constant(csk.clone()));
            let out = net.forward(&cx, &g, init_states(&g, graph.constant(cls.clone()), k).unwrap()).unwrap();
            StateKind::ALL.map(|kind| out.fused.get(kind).map(|v| (*v.value()).clone()))
        };
        let (before, after) = (run(&cls), run(&bumped));
        for kind in StateKind::ALL {
            for i in 0..j {
                if let Some(r) = g.row_of(kind, i) {
                    let (x, y) = (before[kind.index()].as_ref().unwrap(), after[kind.index()].as_ref().unwrap());
                    prop_assert_eq!(x.row(r), y.row(r));
                }
            }
        }
    }

    #[test]
    fn applicable_edges_only(history in speakers(), w in 1usize..5) {
        let g = TransitionGraph::build(&window_over(&history, w)).unwrap();
        prop_assert!(graph_violations(&g).is_empty());
        for e in &g.edges {
            prop_assert!(g.nodes[e.src].has(e.kind.source()) && g.nodes[e.dst].has(e.kind.target()));
        }
    }

    #[test]
    fn window_grows_with_w(history in speakers()) {
        let lens: Vec<usize> = (1..6).map(|w| window_over(&history, w).len()).collect();
        prop_assert!(lens.windows(2).all(|p| p[0] <= p[1]));
        let last = window_over(&history, 2).placeholder();
        prop_assert_eq!(last, (history.len(), Speaker::Supporter));
    }

    #[test]
    fn nucleus_support_grows_with_p(logits in prop::collection::vec(-5.0f64..5.0, 1..30), k in 1usize..40) {
        let cfg = |p| GenerationConfig { top_p: p, top_k: k, temperature: 1.0, repetition_penalty: 1.0, ..Default::default() };
        let mut prev = 0;
        for p in [0.05, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let s = sampling_support(&logits, &[], &cfg(p)).unwrap();
            let total: f64 = s.iter().map(|x| x.1).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(s.len() >= prev && s.len() <= k.min(logits.len()));
            prev = s.len();
        }
        prop_assert_eq!(prev, k.min(logits.len()));
    }

    #[test]
    fn top_n_accuracy_is_monotone(probs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 8), 1..12),
                                  golds in prop::collection::vec(0usize..8, 12)) {
        let golds: Vec<Label> = golds[..probs.len()].iter().map(|&g| Label::ALL[g]).collect();
        let acc: Vec<f64> = (1..=8).map(|n| strategy_accuracy(&probs, &golds, n).unwrap()).collect();
        prop_assert!(acc.windows(2).all(|p| p[0] <= p[1]));
        prop_assert_eq!(acc[7], 1.0);
    }

    #[test]
    fn metrics_match_brute_force(pairs in prop::collection::vec((tokens(), tokens()), 1..6)) {
        let (cands, refs): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        for (c, r) in &pairs {
            prop_assert!((bleu_n(c, r, 2).unwrap() - bleu_oracle(std::slice::from_ref(c), std::slice::from_ref(r), 2)).abs() < 1e-9);
            let rl = rouge_l(c, r, ROUGE_BETA);
            prop_assert!((rl - rouge_oracle(c, r, ROUGE_BETA)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&rl));
        }
        prop_assert!((corpus_bleu(&cands, &refs, 4).unwrap() - bleu_oracle(&cands, &refs, 4)).abs() < 1e-9);
        for n in [1, 2] {
            let d = distinct_n(&cands, n);
            prop_assert!((d - distinct_oracle(&cands, n)).abs() < 1e-12);
        }
    }

    #[test]
    fn split_sizes_cover_everything(n in 0usize..500, a in 0u32..10, b in 0u32..10, c in 1u32..10) {
        let s = split_sizes(n, &[a, b, c]);
        prop_assert_eq!(s.iter().sum::<usize>(), n);
        let total = (a + b + c) as f64;
        for (size, r) in s.iter().zip([a, b, c]) {
            prop_assert!((*size as f64 - n as f64 * r as f64 / total).abs() < 1.0);
        }
    }
}

#[test]
fn decoder_is_causal() {
    let (vocab, ex) = four_node_example(4);
    let model = tiny_model(vocab.len(), 4);
    let graph = Graph::new();
    let cx = model.ctx(&graph);
    let side = model.context_side(&cx, &ex, false).unwrap();
    let a = model.decode(&cx, &side, &[2, 10, 11, 12, 13]).unwrap().value();
    let b = model.decode(&cx, &side, &[2, 10, 11, 40, 41]).unwrap().value();
    for r in 0..3 {
        assert_eq!(a.row(r), b.row(r));
    }
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn model_checkpoint_round_trip() {
    for seed in [0, 1, 2] {
        let (vocab, ex) = four_node_example(seed);
        let mut model = tiny_model(vocab.len(), seed);
        model.params.round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let meta = CheckpointMeta { model: model.config.clone(), vocab: Some(vocab.clone()), ..Default::default() };
        model.save(&path, &meta).unwrap();
        let (back, meta_back) = TransitionModel::load(&path).unwrap();
        assert_eq!(meta_back.vocab.unwrap().tokenize("w3 w7"), vocab.tokenize("w3 w7"));
        for ((_, n1, t1), (_, n2, t2)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
        assert_eq!(full_loss(&model, &ex), full_loss(&back, &ex));
    }
}
