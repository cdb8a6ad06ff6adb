mod common;

use std::collections::BTreeMap;

use cberl::corpus::SpeakerId;
use cberl::fusion::standard_normal;
use cberl::graph::{
    apply_mask, build_graph, edge_scores, edge_weights, propagate, reconstruction_loss,
    reconstruction_loss_on_tape, ConversationGraph, Gnn, GnnConfig, GnnLayer, MaskPlan, Relation,
    Window,
};
use cberl::nn::ParamStore;
use cberl::tape::{Matrix, Tape};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone)]
struct Fixture {
    store: ParamStore,
    layer: GnnLayer,
}

fn fixture(width: usize, hidden: usize, seed: u64) -> Fixture {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = GnnLayer::new(&mut store, "layer", width, hidden, &mut rng);
    // Nonzero biases so the oracle exercises them.
    for lin in [&layer.attn_hidden, &layer.attn_out] {
        let b = lin.bias.unwrap();
        let shape = store.get(b).dim();
        *store.get_mut(b) = common::random_matrix(shape.0, shape.1, 0.5, &mut rng);
    }
    Fixture { store, layer }
}

fn store(f: &mut Fixture) -> &mut ParamStore {
    &mut f.store
}

fn speakers(ids: &[u32]) -> Vec<SpeakerId> {
    ids.iter().map(|&i| SpeakerId(i)).collect()
}

fn random_graph(rng: &mut ChaCha8Rng) -> ConversationGraph {
    let n = rng.random_range(1..=12);
    let k = rng.random_range(1..=3);
    let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let window = Window {
        past: rng.random_range(0..5),
        future: rng.random_range(0..5),
    };
    build_graph(&speakers(&ids), window).unwrap()
}

fn layer_output(f: &Fixture, phi: &Matrix, graph: &ConversationGraph, mask: &MaskPlan) -> Matrix {
    let scores = edge_scores(&f.layer, &f.store, phi, graph).unwrap();
    let w = edge_weights(&scores, graph, mask).unwrap();
    propagate(&f.layer, &f.store, phi, graph, &w).unwrap()
}

/// Attention score of the pair `(i, j)` from scalar loops over the raw
/// parameters.
fn oracle_score(f: &Fixture, phi: &Matrix, i: usize, j: usize) -> f64 {
    let w1 = f.store.get(f.layer.attn_hidden.weight);
    let b1 = f.store.get(f.layer.attn_hidden.bias.unwrap());
    let w2 = f.store.get(f.layer.attn_out.weight);
    let b2 = f.store.get(f.layer.attn_out.bias.unwrap());
    let input: Vec<f64> = phi.row(i).iter().chain(phi.row(j).iter()).copied().chain([1.0]).collect();
    let mut s = b2[[0, 0]];
    for h in 0..w1.ncols() {
        let a: f64 = b1[[0, h]] + input.iter().enumerate().map(|(k, v)| v * w1[[k, h]]).sum::<f64>();
        s += a.max(0.0) * w2[[h, 0]];
    }
    s
}

/// Dense-matrix oracle: one `[n x n]` coefficient matrix per relation,
/// `H = relu(Σ_r A_r φ W_r)`.
fn dense_oracle(f: &Fixture, phi: &Matrix, speakers: &[SpeakerId], window: Window) -> Matrix {
    let n = speakers.len();
    let mut out = Matrix::zeros((n, f.layer.self_transform.out_dim));
    for r in Relation::ALL {
        let mut a = Matrix::zeros((n, n));
        for i in 0..n {
            let members: Vec<usize> = (0..n)
                .filter(|&j| {
                    let in_window = (j <= i && i - j <= window.past) || (j > i && j - i <= window.future);
                    let rel = match (speakers[i] == speakers[j], j.cmp(&i)) {
                        (_, std::cmp::Ordering::Equal) => Relation::SelfLoop,
                        (true, std::cmp::Ordering::Less) => Relation::SameSpeakerPast,
                        (true, std::cmp::Ordering::Greater) => Relation::SameSpeakerFuture,
                        (false, std::cmp::Ordering::Less) => Relation::CrossSpeakerPast,
                        (false, std::cmp::Ordering::Greater) => Relation::CrossSpeakerFuture,
                    };
                    in_window && rel == r
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let s: Vec<f64> = members.iter().map(|&j| oracle_score(f, phi, i, j)).collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            let c = members.len() as f64;
            for (&j, v) in members.iter().zip(&s) {
                a[[i, j]] = v.exp() / z / c;
            }
        }
        let w = match r {
            Relation::SelfLoop => f.layer.self_transform.weight,
            other => f.layer.relations[other.index()].weight,
        };
        out = out + a.dot(phi).dot(f.store.get(w));
    }
    out.mapv(|v| v.max(0.0))
}

#[test]
fn propagation_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..100 {
        let n = rng.random_range(1..=12);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let window = Window {
            past: rng.random_range(0..5),
            future: rng.random_range(0..5),
        };
        let sp = speakers(&ids);
        let g = build_graph(&sp, window).unwrap();
        let f = fixture(4, 5, trial);
        let phi = standard_normal(n, 4, trial + 1000);
        let got = layer_output(&f, &phi, &g, &MaskPlan::none(n));
        let want = dense_oracle(&f, &phi, &sp, window);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-8, "trial {trial}: {a} vs {b}");
        }
    }
}

#[test]
fn three_node_line_by_hand() {
    // Speakers A B A with a one-step window: every group has a single member,
    // so each coefficient is 1.
    let f = fixture(3, 4, 2);
    let g = build_graph(&speakers(&[0, 1, 0]), Window { past: 1, future: 1 }).unwrap();
    let phi = standard_normal(3, 3, 3);
    let got = layer_output(&f, &phi, &g, &MaskPlan::none(3));
    let w = |r: Relation| match r {
        Relation::SelfLoop => f.store.get(f.layer.self_transform.weight).clone(),
        other => f.store.get(f.layer.relations[other.index()].weight).clone(),
    };
    let row = |i: usize| phi.row(i).to_owned();
    let relu = |v: ndarray::Array1<f64>| v.mapv(|x| x.max(0.0));
    let want = [
        relu(row(0).dot(&w(Relation::SelfLoop)) + row(1).dot(&w(Relation::CrossSpeakerFuture))),
        relu(
            row(1).dot(&w(Relation::SelfLoop))
                + row(0).dot(&w(Relation::CrossSpeakerPast))
                + row(2).dot(&w(Relation::CrossSpeakerFuture)),
        ),
        relu(row(2).dot(&w(Relation::SelfLoop)) + row(1).dot(&w(Relation::CrossSpeakerPast))),
    ];
    for (i, expected) in want.iter().enumerate() {
        for (a, b) in got.row(i).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn self_loops_alone_apply_the_self_transform() {
    let f = fixture(4, 3, 4);
    let g = build_graph(&speakers(&[0, 1, 0, 1, 2]), Window { past: 0, future: 0 }).unwrap();
    let phi = standard_normal(5, 4, 5);
    let got = layer_output(&f, &phi, &g, &MaskPlan::none(5));
    let want = phi.dot(f.store.get(f.layer.self_transform.weight)).mapv(|v| v.max(0.0));
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn two_node_score_by_hand() {
    let mut f = fixture(1, 2, 5);
    let set = |store: &mut ParamStore, id, v: &[f64]| {
        let shape = store.get(id).dim();
        *store.get_mut(id) = Matrix::from_shape_vec(shape, v.to_vec()).unwrap();
    };
    let l = f.layer.clone();
    // Hidden units over [phi_i, phi_j, 1].
    set(&mut f.store, l.attn_hidden.weight, &[1.0, 0.0, 2.0, -1.0, 0.5, 0.0]);
    set(&mut f.store, l.attn_hidden.bias.unwrap(), &[0.0, 0.25]);
    set(&mut f.store, l.attn_out.weight, &[3.0, -2.0]);
    set(&mut f.store, l.attn_out.bias.unwrap(), &[0.1]);
    let g = build_graph(&speakers(&[0, 1]), Window { past: 1, future: 1 }).unwrap();
    let phi = Matrix::from_shape_vec((2, 1), vec![1.0, -2.0]).unwrap();
    let scores = edge_scores(&f.layer, &f.store, &phi, &g).unwrap();
    // Target 0, source 1: input [1, -2, 1].
    // h1 = relu(1 - 4 + 0.5) = 0, h2 = relu(0 + 2 + 0 + 0.25) = 2.25, score = 0.1 - 4.5.
    let k = g.edges.iter().position(|e| e.target == 0 && e.source == 1).unwrap();
    assert!((scores[k] - (-4.4)).abs() < 1e-12, "{}", scores[k]);
    // Target 1, source 0: input [-2, 1, 1].
    // h1 = relu(-2 + 2 + 0.5) = 0.5, h2 = relu(0 - 1 + 0.25) = 0, score = 0.1 + 1.5.
    let k = g.edges.iter().position(|e| e.target == 1 && e.source == 0).unwrap();
    assert!((scores[k] - 1.6).abs() < 1e-12, "{}", scores[k]);
}

#[test]
fn masked_sources_send_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..30 {
        let g = random_graph(&mut rng);
        let n = g.num_nodes;
        let mask = apply_mask(n, 0.4, trial).unwrap();
        let f = fixture(3, 4, trial);
        let phi = standard_normal(n, 3, trial + 50);
        let w = edge_weights(&edge_scores(&f.layer, &f.store, &phi, &g).unwrap(), &g, &mask).unwrap();
        for (k, e) in g.edges.iter().enumerate() {
            if e.relation != Relation::SelfLoop && mask.is_masked(e.source) {
                assert!(!w.active[k]);
                assert_eq!(w.weights[k], 0.0);
            }
        }
        // Changing a masked node moves no other node, with either code path.
        let base = layer_output(&f, &phi, &g, &mask);
        for j in mask.masked_nodes() {
            let mut moved = phi.clone();
            moved.row_mut(j).fill(0.0);
            let after = layer_output(&f, &moved, &g, &mask);
            let tape = Tape::new();
            let b = f.store.bind_frozen(&tape);
            let p = tape.constant(moved.clone());
            let on_tape = tape.value(f.layer.forward(&tape, &b, p, &g, &mask)).clone();
            for i in (0..n).filter(|&i| i != j) {
                assert_eq!(base.row(i), after.row(i), "trial {trial}: node {i} felt masked {j}");
                for (a, b) in on_tape.row(i).iter().zip(base.row(i)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn relabelling_permutes_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..30 {
        let g = random_graph(&mut rng);
        let n = g.num_nodes;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mask = apply_mask(n, 0.3, trial).unwrap();
        let mut moved_mask = MaskPlan::none(n);
        for i in 0..n {
            moved_mask.masked[perm[i]] = mask.masked[i];
        }
        let f = fixture(3, 4, trial);
        let phi = standard_normal(n, 3, trial + 70);
        let mut moved_phi = Matrix::zeros(phi.dim());
        for i in 0..n {
            moved_phi.row_mut(perm[i]).assign(&phi.row(i));
        }
        let base = layer_output(&f, &phi, &g, &mask);
        let moved = layer_output(&f, &moved_phi, &g.relabel(&perm), &moved_mask);
        for i in 0..n {
            for (a, b) in base.row(i).iter().zip(moved.row(perm[i])) {
                assert!((a - b).abs() < 1e-10, "trial {trial}");
            }
        }
    }
}

#[test]
fn layer_gradient_matches_finite_differences() {
    let f = fixture(4, 5, 8);
    let g = build_graph(&speakers(&[0, 1, 1, 0, 2, 0, 1]), Window { past: 2, future: 2 }).unwrap();
    let mask = apply_mask(7, 0.3, 3).unwrap();
    let phi = standard_normal(7, 4, 9);
    let target = standard_normal(7, 4, 10);
    let tape = Tape::new();
    let bound = f.store.bind(&tape);
    let out = f.layer.forward(&tape, &bound, tape.constant(phi.clone()), &g, &mask);
    let loss = reconstruction_loss_on_tape(&tape, tape.constant(target.clone()), out);
    let grads = f.store.gradients(&bound, &tape.backward(loss));
    let value_loss = |fx: &Fixture| reconstruction_loss(&target, &layer_output(fx, &phi, &g, &mask)).unwrap();
    assert!((tape.scalar(loss) - value_loss(&f)).abs() < 1e-12);
    let err = common::gradient_check(&f, store, &grads, value_loss, 40, 2);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn reconstruction_loss_strictly_decreases() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = GnnConfig {
        width: 8,
        attn_hidden: 6,
        recon_hidden: 8,
        ..GnnConfig::default()
    };
    let gnn = Gnn::new(&mut store, "gnn", 5, 5, &cfg, &mut rng);
    let g = build_graph(&speakers(&[0, 1, 0, 1, 0, 1, 2, 2, 0, 1]), cfg.window).unwrap();
    let mask = apply_mask(10, 0.3, 1).unwrap();
    let l = standard_normal(10, 5, 11);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let x = tape.constant(l.clone());
        let phi = gnn.forward(&tape, &bound, x, &g, &mask);
        let loss = reconstruction_loss_on_tape(&tape, x, gnn.reconstruct(&tape, &bound, phi));
        losses.push(tape.scalar(loss));
        let grads = store.gradients(&bound, &tape.backward(loss));
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(&grads) {
            store.get_mut(id).scaled_add(-0.02, g);
        }
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(losses[49] < 0.9 * losses[0], "{} -> {}", losses[0], losses[49]);
}

#[test]
fn identity_transforms_on_one_speaker_line() {
    // Identity transforms and equal scores: each of the c members of a group
    // gets weight 1/c² since the softmax is divided by the group size again.
    let mut f = fixture(2, 3, 12);
    let l = f.layer.clone();
    for lin in l.relations.iter().chain([&l.self_transform]) {
        *f.store.get_mut(lin.weight) = Matrix::eye(2);
    }
    *f.store.get_mut(l.attn_out.weight) = Matrix::zeros((3, 1));
    let g = build_graph(&speakers(&[0, 0, 0]), Window { past: 2, future: 2 }).unwrap();
    let phi = Matrix::from_shape_vec((3, 2), vec![1.0, -1.0, 2.0, 0.5, -3.0, 4.0]).unwrap();
    let got = layer_output(&f, &phi, &g, &MaskPlan::none(3));
    let row = |i: usize| phi.row(i).to_owned();
    let want = [
        row(0) + (row(1) + row(2)) / 4.0,
        row(1) + row(0) + row(2),
        row(2) + (row(0) + row(1)) / 4.0,
    ];
    for (i, w) in want.iter().enumerate() {
        for (a, b) in got.row(i).iter().zip(w.mapv(|v| v.max(0.0)).iter()) {
            assert!((a - b).abs() < 1e-12, "node {i}: {a} vs {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_sum_to_one_per_group(seed in 0u64..10_000, rate in 0.0f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng);
        let mask = apply_mask(g.num_nodes, rate, seed).unwrap();
        let scores: Vec<f64> = g.edges.iter().map(|_| rng.random_range(-30.0..30.0)).collect();
        let w = edge_weights(&scores, &g, &mask).unwrap();
        let mut sums: BTreeMap<(usize, Relation), (f64, usize)> = BTreeMap::new();
        for (k, e) in g.edges.iter().enumerate() {
            let entry = sums.entry((e.target, e.relation)).or_default();
            entry.0 += w.weights[k];
            entry.1 += w.active[k] as usize;
            prop_assert!(w.weights[k] >= 0.0);
        }
        for (group, (sum, active)) in sums {
            if active == 0 {
                prop_assert!(w.empty_groups.contains(&group));
                prop_assert_eq!(sum, 0.0);
            } else {
                prop_assert!((sum - 1.0).abs() < 1e-6, "{:?} sums to {}", group, sum);
            }
        }
    }
}
