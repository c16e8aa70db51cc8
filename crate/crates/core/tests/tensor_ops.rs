//! Primitive-level checks: matmul against a triple loop, every backward rule
//! against central differences, and the softmax / layer-norm invariants.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tft_retail::tensor::{grad_check, GradCheckConfig, Graph, ParamStore, Result, Tensor, Var};

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `C[i][j] = Σ_k A[i][k]·B[k][j]` with no tricks.
fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// Gradient-checks `sum(op(params) ⊙ W)` for a fixed random weighting `W`.
fn check_op<F>(shapes: &[&[usize]], seed: u64, op: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), randn(s, &mut rng)).unwrap())
        .collect();
    let weight_seed = seed ^ 0x5eed;
    let cfg = GradCheckConfig {
        samples: 60,
        seed,
        ..GradCheckConfig::default()
    };
    let report = grad_check(
        &store,
        |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect::<Result<_>>()?;
            let out = op(g, &vars)?;
            let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed);
            let w = g.constant(randn(g.shape(out), &mut wrng))?;
            let prod = g.mul(out, w)?;
            g.sum_all(prod)
        },
        &cfg,
    )
    .unwrap_or_else(|e| panic!("gradient check failed: {e}"));
    assert_eq!(report.params_covered, shapes.len());
    assert!(report.max_rel_error <= 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(&[m, k], &mut rng);
        let b = randn(&[k, n], &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let c = g.matmul(va, vb).unwrap();
        prop_assert_eq!(g.shape(c), &[m, n]);
        let oracle = triple_loop(a.data(), b.data(), m, k, n);
        for (x, y) in g.value(c).data().iter().zip(&oracle) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn bmm_matches_triple_loop(batch in 1usize..4, m in 1usize..6, k in 1usize..6, n in 1usize..6, trans in any::<bool>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(&[batch, m, k], &mut rng);
        let b = if trans { randn(&[batch, n, k], &mut rng) } else { randn(&[batch, k, n], &mut rng) };
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let c = g.bmm(va, vb, trans).unwrap();
        prop_assert_eq!(g.shape(c), &[batch, m, n]);
        for bi in 0..batch {
            let ab = &a.data()[bi * m * k..(bi + 1) * m * k];
            let bb = &b.data()[bi * k * n..(bi + 1) * k * n];
            let bb = if trans { transpose(bb, n, k) } else { bb.to_vec() };
            let oracle = triple_loop(ab, &bb, m, k, n);
            let got = &g.value(c).data()[bi * m * n..(bi + 1) * m * n];
            for (x, y) in got.iter().zip(&oracle) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn softmax_rows_are_positive_and_normalised(rows in 1usize..6, cols in 1usize..12, scale in 0.1f64..30.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&[rows, cols], &mut rng);
        let mut g = Graph::new();
        let vx = g.constant(x).unwrap();
        let vx = g.scale(vx, scale).unwrap();
        let s = g.softmax(vx, None).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardises_rows(rows in 1usize..6, cols in 2usize..70, shift in -50.0f64..50.0, spread in 0.1f64..20.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = randn(&[rows, cols], &mut rng);
        for v in x.data_mut() {
            *v = shift + spread * *v;
        }
        let mut g = Graph::new();
        let vx = g.constant(x).unwrap();
        let gamma = g.constant(Tensor::full(&[cols], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[cols])).unwrap();
        let y = g.layer_norm(vx, gamma, beta).unwrap();
        for row in g.value(y).data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-7);
            prop_assert!((var - 1.0).abs() < 1e-6, "variance {}", var);
        }
    }

    #[test]
    fn elementwise_backward_on_random_shapes(r in 1usize..5, c in 1usize..6, seed in any::<u64>()) {
        check_op(&[&[r, c], &[r, c]], seed, |g, v| g.add(v[0], v[1]));
        check_op(&[&[r, c], &[r, c]], seed, |g, v| g.mul(v[0], v[1]));
        check_op(&[&[r, c]], seed, |g, v| g.scale(v[0], -1.7));
        check_op(&[&[r, c]], seed, |g, v| g.sigmoid(v[0]));
        check_op(&[&[r, c]], seed, |g, v| g.tanh(v[0]));
        check_op(&[&[r, c]], seed, |g, v| g.elu(v[0]));
        check_op(&[&[r, c], &[c]], seed, |g, v| g.add_bias(v[0], v[1]));
    }

    #[test]
    fn structural_backward_on_random_shapes(b in 1usize..4, t in 1usize..6, f in 1usize..5, seed in any::<u64>()) {
        check_op(&[&[b, t, f]], seed, |g, v| g.slice(v[0], 1, t / 2, t - t / 2));
        check_op(&[&[b, t, f], &[b, 2, f]], seed, |g, v| g.concat(&[v[0], v[1]], 1));
        check_op(&[&[b, t, f]], seed, |g, v| g.reshape(v[0], &[b * t, f]));
        check_op(&[&[b, f]], seed, |g, v| g.expand(v[0], 1, t));
        check_op(&[&[b, t, f]], seed, |g, v| g.im2col_same(v[0], 3));
        check_op(&[&[b, t, f]], seed, |g, v| g.im2col_same(v[0], 4));
        check_op(&[&[t + 2, f]], seed, move |g, v| {
            let idx: Vec<usize> = (0..b).map(|i| (i * 7) % (t + 2)).collect();
            g.embedding(v[0], &idx)
        });
    }

    #[test]
    fn matrix_backward_on_random_shapes(b in 1usize..3, m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        check_op(&[&[b, m, k], &[k, n]], seed, |g, v| g.matmul(v[0], v[1]));
        check_op(&[&[b, m, k], &[b, k, n]], seed, |g, v| g.bmm(v[0], v[1], false));
        check_op(&[&[b, m, k], &[b, n, k]], seed, |g, v| g.bmm(v[0], v[1], true));
        check_op(&[&[b, m, n]], seed, |g, v| g.softmax(v[0], None));
        check_op(&[&[b, m, n + 1], &[n + 1], &[n + 1]], seed, |g, v| g.layer_norm(v[0], v[1], v[2]));
    }
}

#[test]
fn masked_softmax_backward() {
    let mask: Arc<[bool]> = vec![true, true, false, true, false, true, true, true].into();
    check_op(&[&[3, 2, 4]], 11, move |g, v| g.softmax(v[0], Some(mask.clone())));
}

#[test]
fn relu_backward_away_from_the_kink() {
    // random normals sit well away from 0 relative to eps = 1e-5
    check_op(&[&[4, 5]], 3, |g, v| g.relu(v[0]));
}

#[test]
fn loss_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let target = randn(&[3, 4], &mut rng);
    let t2 = target.clone();
    check_op(&[&[3, 4, 3]], 5, move |g, v| {
        let t = g.constant(target.clone())?;
        let l = g.pinball_loss(v[0], t, &[0.1, 0.5, 0.9])?;
        g.scale(l, 1.0)
    });
    check_op(&[&[3, 4]], 6, move |g, v| {
        let t = g.constant(t2.clone())?;
        g.mse_loss(v[0], t)
    });
}

#[test]
fn dropout_backward_with_a_fixed_mask() {
    check_op(&[&[6, 7]], 4, |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        g.dropout(v[0], 0.3, true, &mut rng)
    });
}

#[test]
fn unreachable_parameters_get_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
    let b = store.add("b", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let va = g.param(&store, a).unwrap();
    let _vb = g.param(&store, b).unwrap();
    let loss = g.sum_all(va).unwrap();
    let grads = g.backward(loss).unwrap().param_grads(&store);
    assert_eq!(grads.get(a).data(), &[1.0, 1.0]);
    assert_eq!(grads.get(b).shape(), &[3]);
    assert!(grads.get(b).data().iter().all(|&x| x == 0.0));
}
