mod common;

use common::*;
use esc_core::decoder::DecoderLayer;
use esc_core::encoder::EncoderLayer;
use esc_core::numerics::loss::{bag_of_words, cross_entropy};
use esc_core::numerics::{
    AttentionMask, Embedding, FeedForward, GatedFusion, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore, Tensor,
};
use esc_core::transition_graph::{init_states, relation_attention, Link, StateKind, TransitionGraph, TransitionNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const TOL: f64 = 1e-4;

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    shapes.iter().map(|s| random_tensor(&mut rng, s, 1.0)).collect()
}

#[test]
fn linear() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut Init::new(seed), "l", 4, 3).unwrap();
        let err = layer_gradcheck(&mut store, &inputs(seed, &[&[2, 4]]), |cx, x| lin.forward(cx, x[0]).unwrap());
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn layer_norm() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "n", 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, random_tensor(&mut rng, &shape, 1.0)).unwrap();
        }
        let err = layer_gradcheck(&mut store, &inputs(seed, &[&[3, 5]]), |cx, x| ln.forward(cx, x[0]).unwrap());
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn embedding() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, &mut Init::new(seed), "e", 6, 3).unwrap();
        let ids = [1, 4, 1, 0];
        let err = layer_gradcheck(&mut store, &[], |cx, _| emb.lookup(cx, &ids).unwrap());
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn feed_forward() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let ff = FeedForward::new(&mut store, &mut Init::new(seed), "f", 4, 6).unwrap();
        let err = layer_gradcheck(&mut store, &inputs(seed, &[&[3, 4]]), |cx, x| ff.forward(cx, x[0]).unwrap());
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn multi_head_attention() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut Init::new(seed), "a", 4, 2).unwrap();
        let mask = AttentionMask::from_fn(3, 4, |i, j| j <= i + 1);
        let err = layer_gradcheck(&mut store, &inputs(seed, &[&[3, 4], &[4, 4]]), |cx, x| {
            mha.forward(cx, x[0], x[1], x[1], Some(&mask)).unwrap()
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn gated_fusion() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let gate = GatedFusion::new(&mut store, &mut Init::new(seed), "g", 3).unwrap();
        let err = layer_gradcheck(&mut store, &inputs(seed, &[&[2, 3], &[2, 3]]), |cx, x| {
            gate.fuse(cx, x[0], x[1]).unwrap().0
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn encoder_layer() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, &mut Init::new(seed), "enc", 4, 2, 8).unwrap();
        let mask = AttentionMask::keys(3, &[true, true, false]);
        let err = layer_gradcheck(&mut store, &inputs(seed, &[&[3, 4]]), |cx, x| layer.forward(cx, x[0], &mask).unwrap());
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn decoder_layer() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let layer = DecoderLayer::new(&mut store, &mut Init::new(seed), "dec", 4, 2, 8).unwrap();
        let causal = AttentionMask::causal(3);
        let mem = AttentionMask::keys(3, &[true, false, true, true]);
        let err = layer_gradcheck(&mut store, &inputs(seed, &[&[3, 4], &[4, 4]]), |cx, x| {
            layer.forward(cx, x[0], x[1], &causal, &mem).unwrap()
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn relation_enhanced_attention() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut Init::new(seed), "a", 4, 2).unwrap();
        let links = [
            Link { src: 0, dst: 1, relation: 3 },
            Link { src: 2, dst: 1, relation: 0 },
            Link { src: 1, dst: 2, relation: 6 },
            Link { src: 0, dst: 2, relation: 3 },
        ];
        let err = layer_gradcheck(&mut store, &inputs(seed, &[&[3, 4], &[3, 4], &[7, 4]]), |cx, x| {
            relation_attention(&mha, cx, x[0], x[1], &links, x[2]).unwrap().output
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn transit_then_interact() {
    use esc_core::corpus::Speaker::{Seeker as K, Supporter as P};
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let net = TransitionNetwork::new(&mut store, &mut Init::new(seed), 4, 2).unwrap();
        let g = TransitionGraph::from_speakers(&[K, P, K]);
        let err = layer_gradcheck(&mut store, &inputs(seed, &[&[4, 4], &[2, 4]]), |cx, x| {
            let out = net.forward(cx, &g, init_states(&g, x[0], Some(x[1])).unwrap()).unwrap();
            let parts: Vec<_> = StateKind::ALL.iter().filter_map(|k| out.fused.get(*k)).collect();
            esc_core::numerics::Var::concat_rows(&parts).unwrap()
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn losses() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let err = layer_gradcheck(&mut store, &inputs(seed, &[&[3, 5]]), |_, x| {
            cross_entropy(x[0], &[4, 0, 2]).unwrap().reshape(vec![1]).unwrap()
        });
        assert!(err < TOL, "cross entropy seed {seed}: {err}");
        let err = layer_gradcheck(&mut store, &inputs(seed, &[&[3, 5]]), |_, x| {
            bag_of_words(x[0], &[vec![1, 2], vec![], vec![0, 4, 4]]).unwrap().reshape(vec![1]).unwrap()
        });
        assert!(err < TOL, "bag of words seed {seed}: {err}");
    }
}

#[test]
fn full_model_sampled_entries() {
    for seed in SEEDS {
        let (vocab, ex) = four_node_example(seed);
        let mut model = tiny_model(vocab.len(), seed);
        let grads = full_grads(&model, &ex);
        let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checked = 0;
        while checked < 12 {
            let p = rng.random_range(0..names.len());
            let k = rng.random_range(0..grads[p].numel());
            let a = grads[p].data()[k];
            if a.abs() < 1e-5 {
                continue;
            }
            let n = central_difference(&mut model, &ex, &names[p], k, 1e-5);
            assert!(rel_err(a, n) < 1e-4, "seed {seed} {}[{k}]: analytic {a} numeric {n}", names[p]);
            checked += 1;
        }
    }
}

#[test]
fn relation_embeddings_reach_generation() {
    let (vocab, ex) = four_node_example(9);
    let model = tiny_model(vocab.len(), 9);
    let graph = esc_core::numerics::Graph::new();
    let cx = model.ctx(&graph);
    let (_, parts) = model.losses(&cx, &ex).unwrap();
    graph.backward(parts.generation).unwrap();
    let id = model.params.id("graph.relations").unwrap();
    let g = graph.param_grads().into_iter().find(|(p, _)| *p == id).unwrap().1;
    assert!(g.data().iter().any(|v| v.abs() > 1e-9));
}
