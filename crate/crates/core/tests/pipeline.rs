use causalcast::anomaly;
use causalcast::diffkit::Checkpoint;
use causalcast::error::Error;
use causalcast::inner::{self, InnerModel, InnerOptions};
use causalcast::rng::mix;
use causalcast::synth::{self, Lorenz96Config};
use causalcast::tensor::{NormStats, RangeKind, SplitAccess, SplitSpec, TensorSeries};
use causalcast::trainer::{self, AdjacencyKind, RunConfig, TAG_AE, TAG_INNER};

const SMALL: &str = r#"
seed = 11
rounds = 2
inner_rounds = 2
outer_epochs = 2

[inner]
steps_per_round = 10

[outer]
k = 1
lag = 4
horizon = 2
hidden = 4
batch = 8

[ae]
epochs = 4
hidden = 8

[split]
kind = "chronological"
train = 0.6
validation = 0.2
"#;

fn lorenz(t: usize, seed: u64) -> (TensorSeries, synth::GroundTruthGraph) {
    synth::simulate_lorenz96(&Lorenz96Config { p: 5, t, substeps: 5, seed, ..Default::default() }).unwrap()
}

#[test]
fn identical_configs_give_identical_runs() {
    let (ts, truth) = lorenz(80, 1);
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    let a = trainer::run(&cfg, &ts, None, Some(&truth)).unwrap();
    let b = trainer::run(&cfg, &ts, None, Some(&truth)).unwrap();
    assert_eq!(a.artifacts, b.artifacts);
    assert_eq!(a.manifest.reproducible_json(), b.manifest.reproducible_json());
    assert_eq!(a.manifest.status, "complete");
}

#[test]
fn single_round_without_outer_training_is_plain_inner_optimization() {
    let (ts, _) = lorenz(60, 2);
    let mut cfg = RunConfig::from_toml(SMALL).unwrap();
    cfg.rounds = 1;
    cfg.outer_epochs = 0;
    let out = trainer::run(&cfg, &ts, None, None).unwrap();

    let split = SplitSpec::chronological(60, 0.6, 0.2).unwrap();
    let mut observed = ts.clone();
    for &(a, b) in &split.test {
        for i in 0..ts.n() {
            for k in a..b {
                observed.set(i, 0, k, 0.0);
            }
        }
    }
    let (stats, _) = NormStats::fit(&observed, &split.train);
    let z = stats.normalize(&observed);
    let (ae, _) = anomaly::pretrain(&z, &split.train, &split.validation, &cfg.ae, mix(&[cfg.seed, TAG_AE])).unwrap();
    let latent = anomaly::encode(&ae, &z).unwrap().values;
    let mut fit_ts = split.indices(RangeKind::Train);
    fit_ts.extend(split.indices(RangeKind::Validation));
    let mut icfg = cfg.inner.clone();
    icfg.max_rounds = cfg.inner_rounds;
    let mut model = InnerModel::new(ae.h_dim, fit_ts.len(), &icfg, mix(&[cfg.seed, TAG_INNER]));
    let opts = InnerOptions { seed: mix(&[cfg.seed, TAG_INNER, 0]), freeze_vae: false };
    let run = inner::optimize_inner(&mut model, &inner::latent_blocks(&latent, fit_ts.iter().copied()), None, &icfg, opts).unwrap();

    let from_pipeline: Vec<_> = out.snapshots.iter().filter(|s| fit_ts.contains(&s.t)).collect();
    assert_eq!(from_pipeline.len(), run.snapshots.len());
    for (p, s) in from_pipeline.iter().zip(&run.snapshots) {
        assert_eq!(p.t, s.t);
        assert_eq!(p.a, s.a);
        assert_eq!((p.lambda, p.c), (s.lambda, s.c));
    }
}

#[test]
fn test_range_is_locked_until_unlocked() {
    let (ts, _) = lorenz(50, 3);
    let split = SplitSpec::chronological(50, 0.6, 0.2).unwrap();
    let access = SplitAccess::new(&ts, &split).unwrap();
    let err = access.range(RangeKind::Test, 0).unwrap_err();
    assert!(matches!(err, Error::AccessDenied(_)));
    assert_eq!(err.code(), 4);
    assert!(access.full().is_err());
    assert!(access.observed().values().iter().enumerate().any(|(i, &v)| v == 0.0 && ts.values()[i] != 0.0));
    access.unlock_test();
    assert_eq!(access.range(RangeKind::Test, 0).unwrap(), ts.slice_time(40, 50));
}

#[test]
fn training_phases_never_see_test_values() {
    let (ts, _) = lorenz(70, 4);
    let mut altered = ts.clone();
    for i in 0..ts.n() {
        for k in 56..70 {
            altered.set(i, 0, k, -ts.get(i, 0, k) * 3.0);
        }
    }
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    let a = trainer::run(&cfg, &ts, None, None).unwrap();
    let b = trainer::run(&cfg, &altered, None, None).unwrap();
    for name in ["ae.ckpt", "inner.ckpt"] {
        assert_eq!(a.artifacts[name], b.artifacts[name], "{name}");
    }
    // Test-time snapshot logits are inferred after unlock; everything else is fixed by then.
    let ga = Checkpoint::from_bytes(&a.artifacts["granger.ckpt"]).unwrap();
    let gb = Checkpoint::from_bytes(&b.artifacts["granger.ckpt"]).unwrap();
    let test_t = |name: &str| name.strip_prefix("adj.a.").and_then(|t| t.parse::<usize>().ok()).is_some_and(|t| t >= 56);
    let fixed = |c: &Checkpoint| c.entries.iter().filter(|(n, _)| !test_t(n)).cloned().collect::<Vec<_>>();
    assert_eq!(fixed(&ga), fixed(&gb));
    assert!(fixed(&ga).len() < ga.entries.len());
    let train_snaps = |o: &trainer::RunOutcome| o.snapshots.iter().filter(|s| s.t < 42).map(|s| s.a.clone()).collect::<Vec<_>>();
    assert_eq!(train_snaps(&a), train_snaps(&b));
    assert_ne!(a.manifest.metrics.test_mae, b.manifest.metrics.test_mae);
}

#[test]
fn random_static_control_runs_without_inner() {
    let (ts, truth) = lorenz(60, 5);
    let mut cfg = RunConfig::from_toml(SMALL).unwrap();
    cfg.adjacency = AdjacencyKind::RandomStatic;
    let out = trainer::run(&cfg, &ts, None, Some(&truth)).unwrap();
    assert!(out.snapshots.is_empty());
    assert!(out.manifest.metrics.test_mae.contains_key("model"));
}

#[test]
fn config_rejects_missing_seed() {
    let err = RunConfig::from_toml("rounds = 1").unwrap_err();
    assert_eq!(err.code(), 2);
}
