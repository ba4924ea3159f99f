use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use causalcast::anomaly::{self, AeConfig, FeatureAutoencoder, ScoreSpace};
use causalcast::diffkit::Activation;
use causalcast::rng::rng_for;
use causalcast::tensor::{NormStats, SplitSpec, TensorSeries};

fn line_series(d: usize, t: usize, seed: u64) -> TensorSeries {
    let mut rng = rng_for(&[seed, 0x11]);
    let dir: Vec<f64> = (0..d).map(|j| 1.0 - 0.3 * j as f64).collect();
    let mut values = vec![0.0; 3 * d * t];
    for i in 0..3 {
        for k in 0..t {
            let s: f64 = rng.sample(StandardNormal);
            for (j, dj) in dir.iter().enumerate() {
                values[(i * d + j) * t + k] = s * dj;
            }
        }
    }
    TensorSeries::with_default_meta(3, d, t, values).unwrap()
}

fn linear_cfg() -> AeConfig {
    AeConfig { h_dim: Some(1), hidden: 1, activation: Activation::Linear, epochs: 200, lr: 1e-2, batch: 64 }
}

#[test]
fn linear_rank_one_data_reconstructs_like_pca() {
    for d in [1, 2] {
        let ts = line_series(d, 400, d as u64);
        let split = SplitSpec::chronological(400, 0.7, 0.1).unwrap();
        let (ae, report) = anomaly::pretrain(&ts, &split.train, &split.validation, &linear_cfg(), 4).unwrap();
        let val = *report.val_mse.last().unwrap();
        assert!(val < 1e-6, "D = {d}: validation MSE {val}");
        assert!(ae.mse(&anomaly::sample_rows(&ts, &split.test)) < 1e-6);
    }
}

#[test]
fn identity_autoencoder_without_training_is_exact() {
    let ts = line_series(2, 50, 9);
    let cfg = AeConfig { epochs: 0, ..linear_cfg() };
    let mut ae = FeatureAutoencoder::identity(2, Activation::Linear);
    let rows = anomaly::sample_rows(&ts, &[(0, 50)]);
    let report = anomaly::fit_rows(&mut ae, &rows, &rows, &cfg, 0).unwrap();
    assert!(report.train_mse.is_empty());
    assert_eq!(ae.mse(&rows), 0.0);
}

#[test]
fn round_trip_error_stays_near_validation_error() {
    let (ts, _) = anomaly::synthetic_events(6, 5, 600, 2, 0.0, 6.0, 3).unwrap();
    let split = SplitSpec::chronological(600, 0.7, 0.1).unwrap();
    let cfg = AeConfig { h_dim: Some(2), epochs: 40, ..Default::default() };
    let (ae, report) = anomaly::pretrain(&ts, &split.train, &split.validation, &cfg, 1).unwrap();
    let latent = anomaly::encode(&ae, &ts).unwrap();
    let again = anomaly::encode(&ae, &ts).unwrap();
    assert_eq!(latent, again);
    let back = anomaly::decode(&ae, &latent.values, None).unwrap();
    let (a, b) = split.train[0];
    let mut se = 0.0;
    let mut count = 0.0;
    for i in 0..ts.n() {
        for j in 0..ts.d() {
            for k in a..b {
                se += (ts.get(i, j, k) - back.get(i, j, k)).powi(2);
                count += 1.0;
            }
        }
    }
    let val = *report.val_mse.last().unwrap();
    assert!(se / count <= 1.5 * val, "round trip {} vs validation {val}", se / count);
}

#[test]
fn same_seed_same_curves() {
    let ts = line_series(2, 200, 5);
    let cfg = AeConfig { epochs: 5, ..Default::default() };
    let (a, ra) = anomaly::pretrain(&ts, &[(0, 150)], &[(150, 200)], &cfg, 8).unwrap();
    let (b, rb) = anomaly::pretrain(&ts, &[(0, 150)], &[(150, 200)], &cfg, 8).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
}

#[test]
fn pretraining_reads_only_training_range() {
    let ts = line_series(2, 300, 6);
    let split = SplitSpec::chronological(300, 0.6, 0.2).unwrap();
    let mut poisoned = ts.clone();
    for &(a, b) in split.validation.iter().chain(&split.test) {
        for i in 0..ts.n() {
            for j in 0..ts.d() {
                for k in a..b {
                    poisoned.set(i, j, k, 1e9);
                }
            }
        }
    }
    let cfg = AeConfig { epochs: 10, ..Default::default() };
    let (clean, _) = anomaly::pretrain(&ts, &split.train, &[], &cfg, 2).unwrap();
    let (dirty, report) = anomaly::pretrain(&poisoned, &split.train, &[], &cfg, 2).unwrap();
    assert!(!report.diverged);
    assert_eq!(clean.checkpoint().to_bytes(), dirty.checkpoint().to_bytes());
}

#[test]
fn random_scores_give_chance_auc() {
    let mut rng = rng_for(&[77]);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.3)).collect();
    let auc = anomaly::auc_rank(&scores, &labels).unwrap();
    assert!((auc - 0.5).abs() < 0.02, "{auc}");
}

#[test]
fn single_class_auc_is_undefined() {
    assert_eq!(anomaly::auc_rank(&[0.1, 0.2], &[true, true]), None);
    assert_eq!(anomaly::auc_sweep(&[0.1, 0.2], &[false, false]), None);
}

#[test]
fn extreme_events_outscore_normal_tail() {
    for seed in 0..20u64 {
        let (ts, labels) = anomaly::synthetic_events(8, 6, 500, 2, 0.01, 6.0, seed).unwrap();
        let split = SplitSpec::chronological(500, 0.7, 0.1).unwrap();
        let (stats, _) = NormStats::fit(&ts, &split.train);
        let z = stats.normalize(&ts);
        let cfg = AeConfig { h_dim: Some(2), epochs: 30, ..Default::default() };
        let (ae, _) = anomaly::pretrain(&z, &split.train, &split.validation, &cfg, seed).unwrap();
        let scores = anomaly::score_cells(&ae, &z, ScoreSpace::Decoded).unwrap();
        let (mut events, mut normal) = (Vec::new(), Vec::new());
        for (row, lab) in scores.iter().zip(&labels) {
            for (&s, &l) in row.iter().zip(lab) {
                if l { events.push(s) } else { normal.push(s) }
            }
        }
        let tail = anomaly::fit_threshold(&normal, 0.99).unwrap();
        let mean = events.iter().sum::<f64>() / events.len() as f64;
        assert!(mean > tail, "seed {seed}: event mean {mean} vs normal 99th percentile {tail}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_ignores_monotone_transforms(seed in any::<u64>(), len in 2usize..200) {
        let mut rng = rng_for(&[seed]);
        let scores: Vec<f64> = (0..len).map(|_| (rng.random_range(0..40) as f64) * 0.1).collect();
        let labels: Vec<bool> = (0..len).map(|_| rng.random_bool(0.4)).collect();
        let base = anomaly::auc_rank(&scores, &labels);
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(base, anomaly::auc_rank(&warped, &labels));
        if let (Some(r), Some(w)) = (base, anomaly::auc_sweep(&scores, &labels)) {
            prop_assert!((r - w).abs() <= 1e-9);
        }
    }
}
