use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use causalcast::diffkit::gradcheck::{check, check_store};
use causalcast::diffkit::{solve, Activation, Graph, Mlp2, ParamStore, Tensor2};
use causalcast::graph::is_acyclic;
use causalcast::inner::{self, InnerConfig, InnerVae};
use causalcast::rng::rng_for;

fn normal(rows: usize, cols: usize, seed: u64) -> Tensor2 {
    let mut rng = rng_for(&[seed, 0x1d]);
    Tensor2::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// `sum_k C(N, k) Tr[(A o A)^k]`, the binomial expansion of the trace.
fn loop_oracle(a: &Tensor2) -> f64 {
    let n = a.rows();
    let sq: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[(i, j)] * a[(i, j)]).collect()).collect();
    let mut power = sq.clone();
    let mut binom = 1.0;
    let mut total = 0.0;
    for k in 1..=n {
        binom = binom * (n - k + 1) as f64 / k as f64;
        total += binom * (0..n).map(|i| power[i][i]).sum::<f64>();
        power = naive_matmul(&power, &sq);
    }
    total
}

fn strictly_upper(n: usize, seed: u64) -> Tensor2 {
    let r = normal(n, n, seed);
    Tensor2::from_fn(n, n, |i, j| if j > i { r[(i, j)] } else { 0.0 })
}

#[test]
fn chain_and_empty_graphs_have_zero_residual() {
    for n in 2..8 {
        assert_eq!(inner::acyclicity(&Tensor2::zeros(n, n)), 0.0);
        let chain = Tensor2::from_fn(n, n, |i, j| if j == i + 1 { 1.5 } else { 0.0 });
        assert!(inner::acyclicity(&chain).abs() < 1e-12);
    }
    let two_cycle = Tensor2::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
    assert!((inner::acyclicity(&two_cycle) - 2.0).abs() < 1e-12);
}

#[test]
fn residual_gradient_matches_closed_form() {
    let a = normal(5, 5, 3).scale(0.4);
    let analytic = inner::acyclicity_with_grad(&a, f64::INFINITY).grad;
    let h = 1e-6;
    for i in 0..5 {
        for j in 0..5 {
            let mut up = a.clone();
            up[(i, j)] += h;
            let mut down = a.clone();
            down[(i, j)] -= h;
            let numeric = (inner::acyclicity(&up) - inner::acyclicity(&down)) / (2.0 * h);
            assert!((numeric - analytic[(i, j)]).abs() <= 1e-5 * numeric.abs().max(1.0), "({i},{j}) {numeric} vs {}", analytic[(i, j)]);
        }
    }
}

#[test]
fn encoder_matches_double_loop() {
    let vae = InnerVae::identity(2, true);
    for seed in 0..10 {
        let a = strictly_upper(4, seed);
        let h = normal(4, 2, seed + 100);
        let (z, lv) = inner::encode_sem(&vae, &a, &h);
        assert!(lv.is_none());
        for i in 0..4 {
            for c in 0..2 {
                let mut expected = h[(i, c)];
                for j in 0..4 {
                    expected -= a[(j, i)] * h[(j, c)];
                }
                assert!((z[(i, c)] - expected).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn decode_inverts_encode_on_dags() {
    let vae = InnerVae::identity(3, true);
    for seed in 0..10 {
        let a = strictly_upper(5, seed);
        let h = normal(5, 3, seed + 7);
        let (z, _) = inner::encode_sem(&vae, &a, &h);
        let back = inner::decode_sem(&vae, &a, &z).unwrap();
        assert!(back.sub(&h).max_abs() < 1e-10);
    }
}

#[test]
fn solve_matches_neumann_series_for_nilpotent() {
    for seed in 0..10 {
        let n = 6;
        let a = strictly_upper(n, seed);
        let z = normal(n, 2, seed + 50);
        let at = a.transpose();
        let mut term = z.clone();
        let mut series = z.clone();
        for _ in 1..n {
            term = at.matmul(&term);
            series = series.add(&term);
        }
        let m = Tensor2::identity(n).sub(&at);
        let x = solve(&m, &z).unwrap();
        assert!(x.sub(&series).max_abs() < 1e-10 * series.max_abs().max(1.0));
    }
}

#[test]
fn mlp2_gradients_match_finite_differences() {
    for act in [Activation::Tanh, Activation::Relu, Activation::Linear] {
        let mut store = ParamStore::new();
        let mut rng = rng_for(&[4]);
        let mlp = Mlp2::new(&mut store, "m", (3, 5, 2), act, &mut rng);
        let x = normal(4, 3, 9);
        let r = check(&[x.clone()], 1e-5, |g, v| {
            let y = mlp.forward(g, &store, v[0]);
            let s = g.square(y);
            g.sum(s)
        });
        assert!(r.passes(1e-4), "{act:?} input: {}", r.max_rel_error);
        let r = check_store(&store, 1e-5, |g, st| {
            let xv = g.constant(x.clone());
            let y = mlp.forward(g, st, xv);
            let s = g.square(y);
            g.sum(s)
        });
        assert!(r.passes(1e-4), "{act:?} params: {}", r.max_rel_error);
    }
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    let mut rng = rng_for(&[8]);
    let vae = InnerVae::new(2, 4, Activation::Tanh, false, &mut rng);
    let a = normal(3, 3, 1).scale(0.3);
    let h = normal(3, 2, 2);
    let eps = normal(3, 2, 3);
    let r = check(&[a, h], 1e-5, |g, v| vae.elbo(g, v[0], v[1], Some(&eps)).unwrap().loss);
    assert!(r.passes(1e-4), "{}", r.max_rel_error);
}

#[test]
fn chain_is_recovered() {
    let b = 500;
    let mut rng = rng_for(&[21]);
    let mut data = Tensor2::zeros(2, b);
    for s in 0..b {
        let x1: f64 = rng.sample(StandardNormal);
        let x2 = 2.0 * x1 + rng.sample::<f64, _>(StandardNormal);
        data[(0, s)] = x1;
        data[(1, s)] = x2;
    }
    let (snap, _) = inner::fit_snapshot(&data, 1, &InnerConfig::default(), 3).unwrap();
    assert!(snap.a[(0, 1)].abs() > snap.a[(1, 0)].abs(), "{:?}", snap.a);
    let (projected, _) = snap.project(0.3);
    assert!(projected[(0, 1)] != 0.0);
    assert_eq!(projected[(1, 0)], 0.0);
}

#[test]
fn independent_noise_gives_empty_graph() {
    let data = normal(4, 400, 33);
    let (snap, _) = inner::fit_snapshot(&data, 1, &InnerConfig::default(), 5).unwrap();
    let (projected, _) = snap.project(0.3);
    assert_eq!(projected.max_abs(), 0.0, "{:?}", snap.a);
    assert!(snap.acyclicity_residual <= 1e-8);
}

#[test]
fn gradient_reuse_accumulates_sum() {
    let x = normal(3, 3, 4);
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let a = g.sum(v);
    let b = g.scale(v, 3.0);
    let b = g.sum(b);
    let out = g.add(a, b);
    let grads = g.backward(out);
    assert!(grads.wrt(v).unwrap().data().iter().all(|&d| d == 4.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residual_is_nonnegative_and_matches_loops(seed in any::<u64>(), n in 2usize..7, scale in 0.05f64..1.5) {
        let a = normal(n, n, seed).scale(scale);
        let alpha = inner::acyclicity(&a);
        let oracle = loop_oracle(&a);
        prop_assert!(alpha >= -1e-12 * oracle.max(1.0));
        prop_assert!((alpha - oracle).abs() <= 1e-9 * oracle.max(1.0), "{} vs {}", alpha, oracle);
    }

    #[test]
    fn zero_residual_iff_dfs_acyclic(seed in any::<u64>(), n in 2usize..6, density in 0.1f64..0.7) {
        let mut rng = rng_for(&[seed]);
        let a = Tensor2::from_fn(n, n, |i, j| if i != j && rng.random_bool(density) { rng.random_range(0.2..2.0) } else { 0.0 });
        prop_assert_eq!(inner::acyclicity(&a) <= 1e-12, is_acyclic(&a, 0.0));
    }

    #[test]
    fn gradient_accumulation_is_order_independent(seed in any::<u64>(), parts in 2usize..8) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor2::zeros(3, 2));
        let grads: Vec<_> = (0..parts).map(|k| (id, normal(3, 2, seed.wrapping_add(k as u64)))).collect();
        store.accumulate_all(&grads);
        let forward = store.grad(id).clone();
        let mut shuffled = grads.clone();
        shuffled.shuffle(&mut rng_for(&[seed, 1]));
        store.zero_grad();
        store.accumulate_all(&shuffled);
        prop_assert!(store.grad(id).sub(&forward).max_abs() <= 1e-12);
    }
}
