use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use causalcast::diffkit::{Activation, Graph, Tensor2};
use causalcast::eval;
use causalcast::outer::{self, record_transitions, AdjacencySource, GrangerModel, GumbelMode, OuterConfig};
use causalcast::rng::rng_for;
use causalcast::synth::{self, VarConfig};
use causalcast::trainer::target_windows;

fn normal(rows: usize, cols: usize, seed: u64) -> Tensor2 {
    let mut rng = rng_for(&[seed, 0x0c]);
    Tensor2::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn positive(n: usize, seed: u64) -> Tensor2 {
    let mut a = normal(n, n, seed).map(|v| v.abs());
    a.set_diagonal(0.0);
    a
}

fn cell_step(model: &GrangerModel, a: &Tensor2, h: &Tensor2, s: &Tensor2) -> Tensor2 {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let hv = g.constant(h.clone());
    let sv = g.constant(s.clone());
    let tr = record_transitions(&mut g, av);
    let out = model.record_cell(&mut g, &model.encoder, tr, hv, sv);
    g.value(out).clone()
}

/// Sets the reset and update gate biases of both cells.
fn force_gates(model: &mut GrangerModel, reset: f64, update: f64) {
    for cell in [model.encoder, model.decoder] {
        let hid = cell.hidden;
        let b = model.store.value_mut(cell.ru_b);
        for c in 0..hid {
            b[(0, c)] = reset;
            b[(0, hid + c)] = update;
        }
    }
}

#[test]
fn update_gate_saturation_carries_state() {
    let cfg = OuterConfig { k: 1, lag: 2, hidden: 3, ..Default::default() };
    let mut model = GrangerModel::new(2, &cfg, 1);
    force_gates(&mut model, 0.0, 30.0);
    let a = positive(4, 2);
    let s = normal(4, 3, 3).scale(0.5);
    let out = cell_step(&model, &a, &normal(4, 2, 4).scale(0.1), &s);
    assert!(out.sub(&s).max_abs() < 1e-9);
}

#[test]
fn open_update_gate_returns_candidate() {
    let cfg = OuterConfig { k: 1, lag: 2, hidden: 3, ..Default::default() };
    let mut model = GrangerModel::new(2, &cfg, 1);
    force_gates(&mut model, -30.0, -30.0);
    let a = positive(4, 2);
    let h = normal(4, 2, 4).scale(0.1);
    let x = cell_step(&model, &a, &h, &normal(4, 3, 5).scale(0.1));
    let y = cell_step(&model, &a, &h, &normal(4, 3, 6).scale(0.1));
    assert!(x.sub(&y).max_abs() < 1e-9, "candidate should ignore the previous state");
}

#[test]
fn carry_model_forecasts_projection_of_zero_state() {
    let cfg = OuterConfig { k: 1, lag: 3, hidden: 4, ..Default::default() };
    let mut model = GrangerModel::new(2, &cfg, 9);
    force_gates(&mut model, 0.0, 1e3);
    let b = model.store.value_mut(model.out_b);
    b[(0, 0)] = 0.25;
    b[(0, 1)] = -1.5;
    let adj: Vec<Tensor2> = (0..3).map(|k| positive(5, k)).collect();
    let inputs: Vec<Tensor2> = (0..3).map(|k| normal(5, 2, 10 + k)).collect();
    let out = model.forecast(&adj, &inputs, 4).unwrap();
    for f in out {
        for i in 0..5 {
            assert_eq!(f.row(i), &[0.25, -1.5]);
        }
    }
}

/// With unit reset, zero update and a linear candidate the cell is the affine
/// map `[x, x, T_f x, T_b x] W + b` on `x = [h, s]`.
#[test]
fn linear_cell_reduces_to_var_layer() {
    let cfg = OuterConfig { k: 1, lag: 1, hidden: 2, candidate: Activation::Linear, ..Default::default() };
    let mut model = GrangerModel::new(3, &cfg, 4);
    let ru = model.encoder.ru_w;
    let zeros = Tensor2::zeros(model.store.value(ru).rows(), model.store.value(ru).cols());
    model.store.set_value(ru, zeros);
    force_gates(&mut model, 1e3, -1e3);
    let (n, d, hid) = (5, 3, 2);
    let a = positive(n, 7);
    let h = normal(n, d, 8);
    let s = normal(n, hid, 9);
    let out = cell_step(&model, &a, &h, &s);

    let deg_out: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    let deg_in: Vec<f64> = (0..n).map(|j| (0..n).map(|i| a[(i, j)]).sum()).collect();
    let x = h.concat_cols(&s);
    let w = model.store.value(model.encoder.c_w);
    let b = model.store.value(model.encoder.c_b);
    let f = d + hid;
    for i in 0..n {
        for c in 0..hid {
            let mut acc = b[(0, c)];
            for r in 0..f {
                let fwd: f64 = (0..n).map(|j| a[(i, j)] * x[(j, r)]).sum::<f64>() / deg_out[i];
                let bwd: f64 = (0..n).map(|j| a[(j, i)] * x[(j, r)]).sum::<f64>() / deg_in[i];
                acc += x[(i, r)] * (w[(r, c)] + w[(f + r, c)]) + fwd * w[(2 * f + r, c)] + bwd * w[(3 * f + r, c)];
            }
            assert!((out[(i, c)] - acc).abs() < 1e-12, "({i},{c}) {} vs {acc}", out[(i, c)]);
        }
    }
}

#[test]
fn diffusion_matches_repeated_multiply() {
    let a = positive(5, 1);
    let x = normal(5, 2, 2);
    let theta: Vec<(Tensor2, Tensor2)> = (0..3).map(|k| (normal(2, 3, 10 + k), normal(2, 3, 20 + k))).collect();
    let got = outer::diffusion_weights(&a, &theta, &x);
    let tf = Tensor2::from_fn(5, 5, |i, j| a[(i, j)] / a.row(i).iter().sum::<f64>());
    let at = a.transpose();
    let tb = Tensor2::from_fn(5, 5, |i, j| at[(i, j)] / at.row(i).iter().sum::<f64>());
    let mut expected = Tensor2::zeros(5, 3);
    for (k, (t1, t2)) in theta.iter().enumerate() {
        let mut pf = Tensor2::identity(5);
        let mut pb = Tensor2::identity(5);
        for _ in 0..k {
            pf = pf.matmul(&tf);
            pb = pb.matmul(&tb);
        }
        expected = expected.add(&pf.matmul(&x).matmul(t1)).add(&pb.matmul(&x).matmul(t2));
    }
    assert!(got.sub(&expected).max_abs() < 1e-12);
}

#[test]
fn zero_logit_edges_average_one_half() {
    let a = Tensor2::zeros(2, 2);
    let draws = 50_000u64;
    let mut total = 0.0;
    for s in 0..draws {
        let r = outer::refine_adjacency(&a, 1.0, Some(s), GumbelMode::Binary);
        total += r.a_outer[(0, 1)] + r.a_outer[(1, 0)];
    }
    let mean = total / (2 * draws) as f64;
    assert!((mean - 0.5).abs() < 0.01, "mean edge probability {mean}");
}

#[test]
fn order_zero_operator_keeps_only_self_causes() {
    let cfg = OuterConfig { k: 2, lag: 2, hidden: 3, ..Default::default() };
    let mut model = GrangerModel::new(2, &cfg, 3);
    for cell in [model.encoder, model.decoder] {
        let f = cell.width();
        for id in [cell.ru_w, cell.c_w] {
            let w = model.store.value_mut(id);
            for r in 2 * f..w.rows() {
                w.row_mut(r).fill(0.0);
            }
        }
    }
    let scores = model.granger_scores(&[positive(4, 1), positive(4, 2)]);
    let causes = outer::extract_granger_causes(&scores, 1e-12);
    for j in 0..4 {
        for i in 0..4 {
            assert_eq!(causes[j][i], u8::from(i == j), "({j},{i}) score {}", scores[(j, i)]);
        }
    }
    assert!(outer::extract_granger_causes(&scores, f64::INFINITY).iter().flatten().all(|&c| c == 0));
}

/// Noiseless ring VAR(1): every variable copies its predecessor.
#[test]
fn learns_noiseless_var_far_better_than_persistence() {
    let n = 6;
    let w = Tensor2::from_fn(n, n, |i, j| if j == (i + n - 1) % n { 0.999 } else { 0.0 });
    let mut vcfg = VarConfig::new(vec![w.clone()], 600, 0.0, 2);
    vcfg.initial = Some(vec![(0..n).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.6).collect()]);
    let (ts, truth) = synth::simulate_var(&vcfg).unwrap();
    let cfg = OuterConfig {
        k: 1,
        lag: 4,
        horizon: 1,
        hidden: 8,
        candidate: Activation::Linear,
        epochs: 60,
        lr: 1e-2,
        batch: 16,
        gumbel_noise: false,
        learn_offset: false,
        learn_snapshots: false,
        ..Default::default()
    };
    let mut model = GrangerModel::new(1, &cfg, 5);
    let mut source = AdjacencySource::Static(truth.to_tensor());
    let train = target_windows((0, 400), 4, 1, Some(1));
    let val = target_windows((400, 480), 4, 1, Some(1));
    let test = target_windows((480, 600), 4, 1, Some(1));
    outer::train_outer(&mut model, &mut source, &ts, &train, &val, &cfg, 5, 0.3).unwrap();
    let mae = outer::evaluate_mae(&model, &source, &ts, &test).unwrap();
    let persistence: f64 = test
        .iter()
        .map(|(_, t)| {
            let pred = eval::persistence_frames(&ts, *t);
            let truth: Vec<Tensor2> = t.range().map(|k| ts.frame(k)).collect();
            eval::frames_mae(&pred, &truth)
        })
        .sum::<f64>()
        / test.len() as f64;
    assert!(mae <= 0.1 * persistence, "model {mae} vs persistence {persistence}");
}

#[test]
fn validation_error_falls_in_early_epochs() {
    let mut improving = 0;
    for seed in 0..20u64 {
        let coefs = synth::random_sparse_var(5, 1, 2, 0.9, seed);
        let (ts, _) = synth::simulate_var(&VarConfig::new(coefs, 300, 1.0, seed)).unwrap();
        let cfg = OuterConfig { k: 1, lag: 4, horizon: 1, hidden: 8, epochs: 5, lr: 1e-3, learn_offset: false, ..Default::default() };
        let mut model = GrangerModel::new(1, &cfg, seed);
        let mut source = AdjacencySource::random_static(5, 2, seed);
        let train = target_windows((0, 220), 4, 1, Some(1));
        let val = target_windows((220, 300), 4, 1, Some(1));
        let report = outer::train_outer(&mut model, &mut source, &ts, &train, &val, &cfg, seed, 0.3).unwrap();
        let v: Vec<f64> = report.epochs.iter().filter_map(|e| e.val_mae).collect();
        if v.len() == 5 && v.windows(2).all(|p| p[1] <= p[0]) {
            improving += 1;
        }
    }
    assert!(improving > 10, "{improving}/20 seeds with non-increasing validation MAE");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cell_output_is_bounded(seed in any::<u64>(), scale in 0.1f64..5.0) {
        let cfg = OuterConfig { k: 2, lag: 1, hidden: 3, ..Default::default() };
        let model = GrangerModel::new(2, &cfg, seed);
        let a = positive(4, seed);
        let s = normal(4, 3, seed ^ 1).scale(scale);
        let out = cell_step(&model, &a, &normal(4, 2, seed ^ 2).scale(scale), &s);
        for (o, p) in out.data().iter().zip(s.data()) {
            prop_assert!(o.abs() <= p.abs().max(1.0) + 1e-12);
        }
    }

    #[test]
    fn refinement_is_deterministic(seed in any::<u64>(), xi in 0.1f64..2.0) {
        let a = normal(4, 4, seed);
        let x = outer::refine_adjacency(&a, xi, Some(seed), GumbelMode::Binary);
        let y = outer::refine_adjacency(&a, xi, Some(seed), GumbelMode::Binary);
        prop_assert_eq!(&x, &y);
        prop_assert!(x.a_outer.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        for i in 0..4 {
            prop_assert_eq!(x.a_outer[(i, i)], 0.0);
        }
    }
}
