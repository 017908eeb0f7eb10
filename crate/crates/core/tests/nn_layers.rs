use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ued_core::nn::{
    clip_global_norm, grad_check, softmax_rows, CellKind, Coverage, Dense, Embedding, Graph, Highway, ParamTree,
    Params, Recurrent, Tensor, Var,
};

const H: f64 = 1e-5;

fn input(g: &mut Graph, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Var {
    let v = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.constant(rows, cols, v)
}

/// Smooth scalar probe: sum of `out ⊙ w` for a fixed random `w`.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Var {
    let (r, c) = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = input(g, &mut rng, r, c);
    let m = g.mul(out, w);
    g.sum(m)
}

#[test]
fn dense_and_highway_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = ParamTree::new();
        let d = Dense::new(&mut tree, "d", 6, 5, &mut rng).unwrap();
        let hw = Highway::new(&mut tree, "hw", 5, &mut rng).unwrap();
        let report = grad_check(&mut tree, H, Coverage::All, |g, p| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = input(g, &mut r, 3, 6);
            let y = d.forward(g, p, x)?;
            let y = g.tanh(y);
            let z = hw.forward(g, p, y)?;
            Ok(probe(g, z, seed))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn recurrent_gradients_both_cells() {
    for kind in [CellKind::Lstm, CellKind::Gru] {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tree = ParamTree::new();
            let emb = Embedding::new(&mut tree, "e", 10, 4, &mut rng).unwrap();
            let rnn = Recurrent::new(&mut tree, "r", kind, 4, 5, true, &mut rng).unwrap();
            let report = grad_check(&mut tree, H, Coverage::All, |g, p| {
                let xs: Vec<Var> = (0..4)
                    .map(|t| emb.forward(g, p, &[t, (t * 3 + 1) % 10]))
                    .collect::<ued_core::Result<_>>()?;
                let out = rnn.forward(g, p, &xs)?;
                let all = g.concat(&[out.last, out.steps[1]]);
                Ok(probe(g, all, seed))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{kind:?} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn zero_weight_lstm_stays_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tree = ParamTree::new();
    let rnn = Recurrent::new(&mut tree, "r", CellKind::Lstm, 3, 4, false, &mut rng).unwrap();
    for p in tree.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let xs: Vec<Var> = (0..5).map(|_| input(&mut g, &mut rng, 2, 3)).collect();
    let out = rnn.forward(&mut g, Params::new(&tree), &xs).unwrap();
    for h in out.steps {
        assert!(g.value(h).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn length_one_bidirectional_sees_the_same_input_twice() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut tree = ParamTree::new();
    let rnn = Recurrent::new(&mut tree, "r", CellKind::Gru, 3, 4, true, &mut rng).unwrap();
    let mut g = Graph::new();
    let x = input(&mut g, &mut rng, 2, 3);
    let p = Params::new(&tree);
    let out = rnn.forward(&mut g, p, &[x]).unwrap();
    assert_eq!(out.steps.len(), 1);
    assert_eq!(g.value(out.steps[0]), g.value(out.last));
    let s0 = rnn.fwd.zero_state(&mut g, 2);
    let f = rnn.fwd.step(&mut g, p, x, s0).unwrap();
    let bwd = rnn.bwd.as_ref().unwrap();
    let s1 = bwd.zero_state(&mut g, 2);
    let b = bwd.step(&mut g, p, x, s1).unwrap();
    let both = g.concat(&[f.h, b.h]);
    assert_eq!(g.value(both), g.value(out.last));
}

#[test]
fn empty_sequence_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tree = ParamTree::new();
    let rnn = Recurrent::new(&mut tree, "r", CellKind::Lstm, 3, 4, false, &mut rng).unwrap();
    let mut g = Graph::new();
    assert!(rnn.forward(&mut g, Params::new(&tree), &[]).is_err());
}

fn tree_with_grads(grads: &[f64]) -> ParamTree {
    let mut tree = ParamTree::new();
    let id = tree.insert("w", Tensor::zeros(&[1, grads.len()])).unwrap();
    tree.accumulate_grad(id, grads);
    tree
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0f64..30.0, 1..40), cols in 1usize..5) {
        let n = v.len() - v.len() % cols;
        prop_assume!(n > 0);
        let p = softmax_rows(&v[..n], cols);
        for row in p.chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn clipping_is_idempotent(g in prop::collection::vec(-10.0f64..10.0, 1..30), max in 0.1f64..5.0) {
        let mut tree = tree_with_grads(&g);
        clip_global_norm(&mut tree, max).unwrap();
        let once = tree.grad(tree.id("w").unwrap()).to_vec();
        prop_assert!(tree.global_grad_norm() <= max * (1.0 + 1e-12));
        clip_global_norm(&mut tree, max).unwrap();
        let twice = tree.grad(tree.id("w").unwrap()).to_vec();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn log_softmax_matches_direct(v in prop::collection::vec(-20.0f64..20.0, 6)) {
        let mut g = Graph::new();
        let x = g.constant(2, 3, v.clone());
        let l = g.log_softmax(x);
        let p = softmax_rows(&v, 3);
        for (a, b) in g.value(l).iter().zip(&p) {
            prop_assert!((a.exp() - b).abs() < 1e-12);
        }
    }
}
