use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use causalcast::diffkit::Tensor2;
use causalcast::eval::{self, AdjacencyPair, ForecastScore, Report};
use causalcast::rng::rng_for;
use causalcast::synth::{self, GroundTruthGraph, VarConfig};
use causalcast::tensor::{NormStats, TensorSeries};

fn series(n: usize, d: usize, t: usize, seed: u64) -> TensorSeries {
    let mut rng = rng_for(&[seed, 0xe1]);
    TensorSeries::from_fn(n, d, t, |_, j, _| 3.0 * j as f64 + (1.0 + j as f64) * rng.sample::<f64, _>(StandardNormal)).unwrap()
}

#[test]
fn random_structure_scores_average_chance() {
    let truth = synth::lorenz96_truth(10);
    let mut rng = rng_for(&[12]);
    let runs = 10_000;
    let mut total = 0.0;
    for _ in 0..runs {
        let pred = Tensor2::from_fn(10, 10, |_, _| rng.random());
        total += eval::score_structure(&pred, &truth, false, None).unwrap().auroc.unwrap();
    }
    let mean = total / runs as f64;
    assert!((mean - 0.5).abs() < 0.02, "{mean}");
}

#[test]
fn perfect_and_inverted_predictions() {
    let truth = synth::lorenz96_truth(6);
    let t = truth.to_tensor();
    let s = eval::score_structure(&t, &truth, true, None).unwrap();
    assert_eq!((s.auroc, s.accuracy_at_threshold), (Some(1.0), 1.0));
    let inv = t.map(|v| 1.0 - v);
    assert_eq!(eval::score_structure(&inv, &truth, true, None).unwrap().auroc, Some(0.0));
    let full = GroundTruthGraph { adjacency: vec![vec![1; 3]; 3], self_edges: true };
    let s = eval::score_structure(&Tensor2::zeros(3, 3), &full, true, None).unwrap();
    assert!(s.auroc.is_none() && s.auroc_note.is_some());
}

#[test]
fn changed_fraction_of_full_flip_at_238() {
    let n = 238;
    let a = Tensor2::zeros(n, n);
    let mut b = Tensor2::filled(n, n, 1.0);
    b.set_diagonal(0.0);
    let pair = AdjacencyPair::new(0, a, 1, b).unwrap();
    let expected = (n * n - n) as f64 / (n * n) as f64;
    assert_eq!(pair.changed_fraction, expected);
}

#[test]
fn forecast_metric_closed_forms() {
    let truth = series(3, 2, 20, 1);
    let same = eval::score_forecast(&truth, &truth, None).unwrap();
    assert_eq!((same.mae, same.rmse), (0.0, 0.0));
    let shifted = TensorSeries::from_fn(3, 2, 20, |i, j, k| truth.get(i, j, k) + 1.0).unwrap();
    let one = eval::score_forecast(&shifted, &truth, None).unwrap();
    assert!((one.mae - 1.0).abs() < 1e-12 && (one.rmse - 1.0).abs() < 1e-12);
}

#[test]
fn raw_mae_is_normalized_mae_times_std() {
    let raw_truth = series(4, 3, 60, 2);
    let raw_pred = series(4, 3, 60, 3);
    let (stats, _) = NormStats::fit(&raw_truth, &[(0, 40)]);
    let s = eval::score_forecast(&stats.normalize(&raw_pred), &stats.normalize(&raw_truth), Some(&stats)).unwrap();
    let direct = eval::score_forecast(&raw_pred, &raw_truth, None).unwrap();
    for j in 0..3 {
        let r = s.raw_mae_per_feature.as_ref().unwrap()[j];
        assert!((r - s.mae_per_feature[j] * stats.std[j]).abs() < 1e-12);
        assert!((r - direct.mae_per_feature[j]).abs() < 1e-9);
    }
}

#[test]
fn var_baseline_recovers_noiseless_system() {
    let coefs = synth::random_sparse_var(5, 2, 2, 0.99, 4);
    let (ts, _) = synth::simulate_var(&VarConfig::new(coefs, 300, 0.0, 4)).unwrap();
    let pred = eval::baseline_var(&ts, 2, &[(0, 200)]).unwrap();
    let truth = ts.slice_time(2, 300);
    let tail = 198;
    let score = eval::score_forecast(&pred.slice_time(tail, pred.t()), &truth.slice_time(tail, truth.t()), None).unwrap();
    assert!(score.mae < 1e-6, "{}", score.mae);
}

#[test]
fn persistence_copies_previous_window() {
    let ts = series(2, 1, 12, 5);
    let p = eval::baseline_persistence(&ts, 3, 2).unwrap();
    for k in 0..p.t() {
        assert_eq!(p.get(1, 0, k), ts.get(1, 0, k + 3 - 2));
    }
}

#[test]
fn identical_reports_are_byte_identical() {
    let mut report = Report::new();
    report.config_hash = Some("abc".into());
    let truth = synth::lorenz96_truth(5);
    let pred = Tensor2::from_fn(5, 5, |j, i| ((j * 5 + i) % 7) as f64 / 7.0);
    report.structure = Some(eval::score_structure(&pred, &truth, false, None).unwrap());
    let s = series(2, 2, 10, 6);
    let f: ForecastScore = eval::score_forecast(&s, &series(2, 2, 10, 7), None).unwrap();
    report.forecast.insert("model".into(), f);
    report.loss_curves.insert("outer_train".into(), vec![1.0, 0.5, 0.25]);
    report.adjacency_pair = Some(AdjacencyPair::new(3, pred.clone(), 4, pred.map(|v| v * 0.5)).unwrap());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files_a = eval::emit_report(&report, a.path()).unwrap();
    let files_b = eval::emit_report(&report.clone(), b.path()).unwrap();
    assert_eq!(files_a, files_b);
    assert!(files_a.len() > 2);
    for name in &files_a {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn structure_auroc_ignores_monotone_transforms(seed in any::<u64>(), p in 5usize..10) {
        let truth = synth::lorenz96_truth(p);
        let mut rng = rng_for(&[seed]);
        let pred = Tensor2::from_fn(p, p, |_, _| rng.random_range(-2.0..2.0));
        let warped = pred.map(|v| v.powi(3) + 2.0 * v);
        let a = eval::score_structure(&pred, &truth, false, None).unwrap();
        let b = eval::score_structure(&warped, &truth, false, None).unwrap();
        prop_assert_eq!(a.auroc, b.auroc);
        prop_assert!(a.auroc.is_some_and(|v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn blend_is_a_contraction(seed in any::<u64>(), a in 0.0f64..=1.0) {
        let truth = series(3, 2, 8, seed);
        let f = series(3, 2, 8, seed ^ 1);
        let p = series(3, 2, 8, seed ^ 2);
        let b = eval::persistence_blend(&f, &p, a).unwrap();
        for k in 0..b.values().len() {
            let t = truth.values()[k];
            let worst = (f.values()[k] - t).abs().max((p.values()[k] - t).abs());
            prop_assert!((b.values()[k] - t).abs() <= worst + 1e-12);
        }
        let one = eval::persistence_blend(&f, &p, 1.0).unwrap();
        let zero = eval::persistence_blend(&f, &p, 0.0).unwrap();
        prop_assert_eq!(one.values(), f.values());
        prop_assert_eq!(zero.values(), p.values());
        let frames = |s: &TensorSeries| (0..s.t()).map(|k| s.frame(k)).collect::<Vec<_>>();
        let sel = eval::select_blend(&frames(&f), &frames(&p), &frames(&truth));
        prop_assert!(sel.validation_mae <= sel.table[0].1 && sel.validation_mae <= sel.table[10].1);
    }
}
