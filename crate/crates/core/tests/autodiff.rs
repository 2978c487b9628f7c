mod common;

use clsr_core::gradcheck::finite_difference_check;
use clsr_core::graph::sigmoid;
use clsr_core::{Graph, Tensor, Var};
use common::rng;
use proptest::prelude::*;

const TOL: f64 = 1e-5;

fn check<F>(f: F, params: &[Tensor])
where
    F: FnMut(&mut Graph, &[Var]) -> clsr_core::Result<Var>,
{
    let r = finite_difference_check(f, params, 1e-5).unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn probe(g: &mut Graph, x: Var, seed: u64) -> clsr_core::Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut rng(seed));
    let w = g.leaf(&w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[test]
fn elementwise_ops() {
    let mut r = rng(1);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[3, 4], 1.0, &mut r);
    check(
        |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            let sg = g.sigmoid(m);
            let e = g.exp(sg);
            let l = g.log(e);
            let sc = g.scale(l, 0.7);
            let sh = g.add_scalar(sc, 0.2);
            probe(g, sh, 9)
        },
        &[a, b],
    );
}

#[test]
fn broadcast_gradients_sum_over_expanded_axes() {
    let mut r = rng(2);
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4], 1.0, &mut r);
    let c = Tensor::randn(&[2, 3, 1], 1.0, &mut r);
    check(
        |g, v| {
            let x = g.add(v[0], v[1])?;
            let y = g.mul(x, v[2])?;
            probe(g, y, 3)
        },
        &[a, b, c],
    );
}

#[test]
fn relu_and_abs_away_from_kinks() {
    let data = vec![-1.5, -0.4, 0.3, 0.9, -2.0, 1.1];
    let a = Tensor::new(&[6], data).unwrap();
    check(
        |g, v| {
            let r = g.relu(v[0]);
            let s = g.abs(v[0])?;
            let t = g.add(r, s)?;
            probe(g, t, 4)
        },
        &[a],
    );
}

#[test]
fn softmax_family_with_temperature() {
    let a = Tensor::randn(&[2, 3, 5], 1.5, &mut rng(5));
    check(
        |g, v| {
            let p = g.softmax(v[0]);
            let q = g.log_softmax(v[0]);
            let pt = g.softmax_with_temperature(v[0], 2.5)?;
            let qt = g.log_softmax_with_temperature(v[0], 0.7)?;
            let s1 = g.add(p, q)?;
            let s2 = g.add(pt, qt)?;
            let s = g.mul(s1, s2)?;
            probe(g, s, 6)
        },
        &[a],
    );
}

#[test]
fn layer_norm_all_inputs() {
    let mut r = rng(7);
    let x = Tensor::randn(&[2, 3, 6], 1.0, &mut r);
    let gain = Tensor::randn(&[6], 1.0, &mut r);
    let bias = Tensor::randn(&[6], 1.0, &mut r);
    check(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(g, y, 8)
        },
        &[x, gain, bias],
    );
}

#[test]
fn batched_matmul_permute_reshape() {
    let mut r = rng(9);
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[2, 4, 5], 1.0, &mut r);
    let w = Tensor::randn(&[5, 3], 1.0, &mut r);
    check(
        |g, v| {
            let ab = g.matmul(v[0], v[1])?;
            let abw = g.matmul(ab, v[2])?;
            let p = g.permute(abw, &[2, 0, 1])?;
            let t = g.transpose_last(p)?;
            let flat = g.reshape(t, &[18])?;
            probe(g, flat, 10)
        },
        &[a, b, w],
    );
}

#[test]
fn gather_accumulates_repeated_rows() {
    let table = Tensor::randn(&[5, 3], 1.0, &mut rng(11));
    let ids = [0, 2, 2, 4, 0, 0];
    check(
        |g, v| {
            let e = g.gather(v[0], &ids, &[2, 3])?;
            probe(g, e, 12)
        },
        &[table],
    );
}

#[test]
fn masked_entries_get_no_gradient() {
    let a = Tensor::randn(&[2, 4], 1.0, &mut rng(13));
    let mask = [false, true, false, false, true, true, false, false];
    check(
        |g, v| {
            let m = g.masked_fill(v[0], &mask, -1e9)?;
            let s = g.softmax(m);
            probe(g, s, 14)
        },
        &[a.clone()],
    );
    let mut g = Graph::new();
    let x = g.input(a.shape(), a.data().to_vec(), true).unwrap();
    let m = g.masked_fill(x, &mask, 0.0).unwrap();
    let loss = probe(&mut g, m, 15).unwrap();
    let grads = g.backward(loss).unwrap();
    let gx = grads.get(x).unwrap();
    for (i, &masked) in mask.iter().enumerate() {
        if masked {
            assert_eq!(gx[i], 0.0);
        } else {
            assert_ne!(gx[i], 0.0);
        }
    }
}

#[test]
fn mean_is_scaled_sum() {
    let a = Tensor::randn(&[3, 3], 1.0, &mut rng(16));
    check(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.mean(sq))
        },
        &[a],
    );
}

#[test]
fn shared_subexpression_accumulates() {
    // f(x) = Σ (x·x + x)
    let a = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut g = Graph::new();
    let x = g.input(&[3], a.data().to_vec(), true).unwrap();
    let xx = g.mul(x, x).unwrap();
    let y = g.add(xx, x).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[3.0, -3.0, 2.0]);
}

#[test]
fn constants_carry_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(&[2], vec![1.0, 2.0]).unwrap();
    let x = g.input(&[2], vec![3.0, 4.0], true).unwrap();
    let y = g.mul(c, x).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in 0u64..1000, t in 0.2f64..5.0) {
        let x = Tensor::randn(&[rows, cols], 3.0, &mut rng(seed));
        let mut g = Graph::new();
        let v = g.leaf(&x);
        let p = g.softmax_with_temperature(v, t).unwrap();
        for row in g.value(p).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&q| (0.0..=1.0).contains(&q)));
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax(x in vec_strategy(6)) {
        let t = Tensor::new(&[2, 3], x).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(&t);
        let p = g.softmax(v);
        let lp = g.log_softmax(v);
        for (a, b) in g.value(p).iter().zip(g.value(lp)) {
            prop_assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(x in vec_strategy(5), c in -50.0f64..50.0) {
        let t = Tensor::new(&[5], x.clone()).unwrap();
        let s = Tensor::new(&[5], x.iter().map(|v| v + c).collect()).unwrap();
        let mut g = Graph::new();
        let a = g.leaf(&t);
        let b = g.leaf(&s);
        let pa = g.softmax(a);
        let pb = g.softmax(b);
        for (u, w) in g.value(pa).iter().zip(g.value(pb)) {
            prop_assert!((u - w).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(seed in 0u64..1000, perm_ix in 0usize..6) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[perm_ix];
        let mut inv = [0; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng(seed));
        let mut g = Graph::new();
        let v = g.leaf(&x);
        let p = g.permute(v, &perm).unwrap();
        let back = g.permute(p, &inv).unwrap();
        prop_assert_eq!(g.value(back), x.data());
        prop_assert_eq!(g.shape(back), x.shape());
    }

    #[test]
    fn matmul_matches_loops(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(&a), g.leaf(&b));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum();
                prop_assert!((g.value(c)[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_is_bounded_and_symmetric(x in -700.0f64..700.0) {
        let s = sigmoid(x);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s + sigmoid(-x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_composites_pass_gradcheck(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[2, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3, 4], 1.0, &mut r);
        let rep = finite_difference_check(
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let s = g.sigmoid(h);
                let l = g.log_softmax(s);
                probe(g, l, seed)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        prop_assert!(rep.max_rel_error < TOL, "{:?}", rep);
    }
}
