//! End-to-end runs: autoencoder pretraining, interleaved inner/outer rounds,
//! test-time forecasting and anomaly scoring.
//!
//! Every random draw derives from the single `seed` of [`RunConfig`] through
//! [`mix`](crate::rng::mix) with a fixed per-component tag, so two runs with
//! the same config produce bit-identical artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::anomaly::{self, AeConfig, AnomalyReport, FeatureAutoencoder, ScoreSpace};
use crate::diffkit::checkpoint::sha256_hex;
use crate::diffkit::{Checkpoint, Tensor2};
use crate::error::{Error, Result};
use crate::eval::{self, BlendSelection, ForecastScore, StructureScore};
use crate::graph::is_acyclic;
use crate::inner::{self, DagSnapshot, InnerConfig, InnerModel, InnerOptions};
use crate::outer::{self, AdjacencySource, EpochRecord, GrangerModel, OuterConfig};
use crate::rng::mix;
use crate::synth::GroundTruthGraph;
use crate::tensor::{NormStats, RangeKind, SeriesWindow, SplitAccess, SplitSpec, TensorSeries};

pub const TAG_AE: u64 = 1;
pub const TAG_INNER: u64 = 2;
pub const TAG_OUTER: u64 = 3;
pub const TAG_MODEL: u64 = 4;
pub const TAG_STATIC: u64 = 5;
pub const TAG_TEST: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SplitConfig {
    /// Leading fractions for train and validation; the rest is test.
    Chronological { train: f64, validation: f64 },
    /// Equal blocks; group `g` tests on block `g` and validates on block `g - 1`.
    Rotating { blocks: usize, group: usize },
    Explicit { train: Vec<(usize, usize)>, validation: Vec<(usize, usize)>, test: Vec<(usize, usize)> },
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self::Chronological { train: 0.7, validation: 0.1 }
    }
}

impl SplitConfig {
    pub fn build(&self, t: usize) -> Result<SplitSpec> {
        match self {
            Self::Chronological { train, validation } => SplitSpec::chronological(t, *train, *validation),
            Self::Rotating { blocks, group } => SplitSpec::rotating(t, *blocks, *group),
            Self::Explicit { train, validation, test } => SplitSpec::new(train.clone(), validation.clone(), test.clone(), t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyKind {
    /// Inner snapshots refined by the outer loop.
    #[default]
    Learned,
    /// Fixed random unit-weight graph; the inner loop is skipped.
    RandomStatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyInput {
    /// The observed test series.
    #[default]
    Observed,
    /// The decoded (or latent) forecast of the test series.
    Forecast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyConfig {
    pub space: ScoreSpace,
    pub input: AnomalyInput,
    /// Quantile of validation normal scores used as the decision threshold.
    pub quantile: f64,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self { space: ScoreSpace::Decoded, input: AnomalyInput::Observed, quantile: 0.995 }
    }
}

fn default_rounds() -> usize {
    3
}
fn default_inner_rounds() -> usize {
    5
}
fn default_outer_epochs() -> usize {
    20
}
fn default_static_degree() -> usize {
    3
}

/// Declarative description of one run. `seed` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Interleaved rounds `R`.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Inner dual rounds per round `E`.
    #[serde(default = "default_inner_rounds")]
    pub inner_rounds: usize,
    /// Outer epochs per round `F`.
    #[serde(default = "default_outer_epochs")]
    pub outer_epochs: usize,
    /// Keep updating the inner encoder/decoder on test timestamps.
    #[serde(default)]
    pub co_train_vae: bool,
    #[serde(default)]
    pub adjacency: AdjacencyKind,
    #[serde(default = "default_static_degree")]
    pub static_degree: usize,
    /// Score the diagonal when comparing structure to a truth graph.
    #[serde(default)]
    pub include_diagonal: bool,
    /// Reuse `ae.ckpt` from `output_dir` when present.
    #[serde(default)]
    pub resume: bool,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub inner: InnerConfig,
    #[serde(default)]
    pub outer: OuterConfig,
    #[serde(default)]
    pub ae: AeConfig,
    #[serde(default)]
    pub anomaly: AnomalyConfig,
}

impl RunConfig {
    /// Defaults for everything but the seed.
    pub fn with_seed(seed: u64) -> Self {
        toml::from_str(&format!("seed = {seed}")).expect("defaults parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.inner_rounds == 0 {
            return Err(Error::Config("rounds and inner_rounds must be >= 1".into()));
        }
        self.inner.validate()?;
        self.outer.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub round: usize,
    pub t: usize,
    pub residual: f64,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMetrics {
    pub ae_train_mse: Vec<f64>,
    pub ae_val_mse: Vec<f64>,
    pub inner_max_residual: Vec<f64>,
    pub outer_epochs: Vec<Vec<EpochRecord>>,
    pub snapshots_total: usize,
    pub snapshots_converged: usize,
    /// Decoded-space test MAE of the model, persistence, the blend and the VAR baseline.
    pub test_mae: BTreeMap<String, f64>,
    /// Full scores (normalized and raw MAE, RMSE) behind `test_mae`.
    pub test_forecast: BTreeMap<String, ForecastScore>,
    pub validation_mae: BTreeMap<String, f64>,
    pub blend: Option<BlendSelection>,
    /// `(weight, test MAE)` over the same grid as the validation blend table.
    pub test_blend_table: Vec<(f64, f64)>,
    pub anomaly: Option<AnomalyReport>,
    pub structure: Option<StructureScore>,
    /// `granger_scores[j][i]` for a cause `j -> i`.
    pub granger_scores: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub status: String,
    pub completed_phases: Vec<String>,
    pub metrics: RunMetrics,
    /// Artifact name to path (relative to the output directory).
    pub checkpoints: BTreeMap<String, String>,
    /// Artifact name to SHA-256 of its bytes.
    pub digests: BTreeMap<String, String>,
    pub acyclicity_violations: Vec<Violation>,
    /// Seconds per phase; excluded from reproducibility comparisons.
    pub wall_clock: BTreeMap<String, f64>,
}

impl RunManifest {
    /// JSON with the wall-clock section removed.
    pub fn reproducible_json(&self) -> String {
        let mut m = self.clone();
        m.wall_clock.clear();
        serde_json::to_string_pretty(&m).expect("manifest serializes")
    }
}

/// In-memory products of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub stats: NormStats,
    pub autoencoder: FeatureAutoencoder,
    pub inner: Option<InnerModel>,
    pub snapshots: Vec<DagSnapshot>,
    pub model: GrangerModel,
    pub source: AdjacencySource,
    pub split: SplitSpec,
    /// Serialized artifacts by name (checkpoints, snapshot TTS, sidecars).
    pub artifacts: BTreeMap<String, Vec<u8>>,
}

/// `(input, target)` windows whose targets lie inside `range` and whose
/// inputs may reach back before it.
pub fn target_windows(range: (usize, usize), lag: usize, horizon: usize, stride: Option<usize>) -> Vec<(SeriesWindow, SeriesWindow)> {
    let stride = stride.unwrap_or(horizon).max(1);
    let mut out = Vec::new();
    let mut s = range.0.max(lag);
    while horizon > 0 && s + horizon <= range.1 {
        out.push((SeriesWindow { start: s - lag, length: lag }, SeriesWindow { start: s, length: horizon }));
        s += stride;
    }
    out
}

/// Windows fully inside each range.
fn inside_windows(ranges: &[(usize, usize)], lag: usize, horizon: usize, stride: Option<usize>) -> Vec<(SeriesWindow, SeriesWindow)> {
    ranges.iter().flat_map(|&r| crate::tensor::windows(r, lag, horizon, stride).pairs).collect()
}

fn phase<T>(clock: &mut BTreeMap<String, f64>, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    log::info!("phase {name}");
    let r = f();
    clock.insert(name.to_string(), t0.elapsed().as_secs_f64());
    r
}

fn window_forecast(model: &GrangerModel, source: &AdjacencySource, latent: &TensorSeries, (input, target): (SeriesWindow, SeriesWindow)) -> Result<Vec<Tensor2>> {
    let adj: Vec<Tensor2> = input.range().map(|t| source.evaluate(t)).collect::<Result<_>>()?;
    let frames: Vec<Tensor2> = input.range().map(|t| latent.frame(t)).collect();
    model.forecast(&adj, &frames, target.length)
}

fn frames_series(frames: &[Tensor2]) -> Result<TensorSeries> {
    let (n, d) = frames.first().map_or((0, 0), Tensor2::shape);
    let values = vec![0.0; n * d * frames.len()];
    let meta = TensorSeries::with_default_meta(n, d, frames.len(), values)?.meta().clone();
    Ok(TensorSeries::from_frames(frames, meta)?)
}

/// Decoded forecasts, persistence and truth frames over a window set.
struct WindowEval {
    model: Vec<Tensor2>,
    persistence: Vec<Tensor2>,
    truth: Vec<Tensor2>,
    latent_model: Vec<Tensor2>,
    latent_truth: Vec<Tensor2>,
}

fn evaluate_windows(
    model: &GrangerModel,
    source: &AdjacencySource,
    ae: &FeatureAutoencoder,
    z: &TensorSeries,
    latent: &TensorSeries,
    windows: &[(SeriesWindow, SeriesWindow)],
) -> Result<WindowEval> {
    let mut ev = WindowEval { model: vec![], persistence: vec![], truth: vec![], latent_model: vec![], latent_truth: vec![] };
    for &w in windows {
        let f = window_forecast(model, source, latent, w)?;
        ev.model.extend(f.iter().map(|h| ae.decode_rows(h)));
        ev.latent_model.extend(f);
        ev.persistence.extend(eval::persistence_frames(z, w.1));
        ev.truth.extend(w.1.range().map(|t| z.frame(t)));
        ev.latent_truth.extend(w.1.range().map(|t| latent.frame(t)));
    }
    Ok(ev)
}

/// Runs the whole procedure on in-memory data. `labels` (an `N x T` grid) and
/// `truth` enable anomaly and structure scoring.
pub fn run(cfg: &RunConfig, data: &TensorSeries, labels: Option<&[Vec<bool>]>, truth: Option<&GroundTruthGraph>) -> Result<RunOutcome> {
    run_with(cfg, data, labels, truth, None)
}

fn run_with(
    cfg: &RunConfig,
    data: &TensorSeries,
    labels: Option<&[Vec<bool>]>,
    truth: Option<&GroundTruthGraph>,
    pretrained: Option<FeatureAutoencoder>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let split = cfg.split.build(data.t())?;
    let access = SplitAccess::new(data, &split)?;
    let mut clock = BTreeMap::new();
    let mut metrics = RunMetrics::default();
    let mut completed = Vec::new();
    let mut violations = Vec::new();
    let mut artifacts: BTreeMap<String, Vec<u8>> = BTreeMap::new();

    // Everything before the test phase sees the series with test steps zeroed.
    let observed = access.observed();
    let (stats, _) = NormStats::fit(&observed, &split.train);
    let z_obs = stats.normalize(&observed);

    let ae = phase(&mut clock, "ae", || match pretrained {
        Some(ae) => Ok(ae),
        None => {
            let (ae, rep) = anomaly::pretrain(&z_obs, &split.train, &split.validation, &cfg.ae, mix(&[cfg.seed, TAG_AE]))?;
            metrics.ae_train_mse = rep.train_mse;
            metrics.ae_val_mse = rep.val_mse;
            Ok(ae)
        }
    })?;
    completed.push("ae".to_string());
    let latent_obs = anomaly::encode(&ae, &z_obs)?.values;
    let n = data.n();

    let mut fit_ts: Vec<usize> = split.indices(RangeKind::Train);
    fit_ts.extend(split.indices(RangeKind::Validation));
    fit_ts.sort_unstable();

    let mut inner_cfg = cfg.inner.clone();
    inner_cfg.max_rounds = cfg.inner_rounds;
    let mut outer_cfg = cfg.outer.clone();
    outer_cfg.epochs = cfg.outer_epochs;

    let learned = cfg.adjacency == AdjacencyKind::Learned;
    let mut inner_model = learned.then(|| InnerModel::new(ae.h_dim, fit_ts.len(), &inner_cfg, mix(&[cfg.seed, TAG_INNER])));
    let mut snapshots: Vec<DagSnapshot> = Vec::new();
    let mut source = if learned {
        AdjacencySource::learned(n, std::iter::empty(), outer_cfg.learn_offset, outer_cfg.xi, outer_cfg.gumbel)
    } else {
        AdjacencySource::random_static(n, cfg.static_degree, mix(&[cfg.seed, TAG_STATIC]))
    };
    let mut model = GrangerModel::new(ae.h_dim, &outer_cfg, mix(&[cfg.seed, TAG_MODEL]));

    let train_w = inside_windows(&split.train, outer_cfg.lag, outer_cfg.horizon, outer_cfg.stride);
    let val_w = inside_windows(&split.validation, outer_cfg.lag, outer_cfg.horizon, outer_cfg.stride);
    let blocks = inner::latent_blocks(&latent_obs, fit_ts.iter().copied());

    phase(&mut clock, "rounds", || {
        for round in 0..cfg.rounds {
            if let Some(im) = inner_model.as_mut() {
                let start = (!snapshots.is_empty()).then_some(snapshots.as_slice());
                let opts = InnerOptions { seed: mix(&[cfg.seed, TAG_INNER, round as u64]), freeze_vae: false };
                let run = inner::optimize_inner(im, &blocks, start, &inner_cfg, opts)?;
                metrics.inner_max_residual.push(run.snapshots.iter().map(|s| s.acyclicity_residual).fold(0.0, f64::max));
                snapshots = run.snapshots;
                for s in &snapshots {
                    source.insert(s.t, s.a.clone());
                }
            }
            if cfg.outer_epochs == 0 || train_w.is_empty() {
                continue;
            }
            let rep = outer::train_outer(
                &mut model,
                &mut source,
                &latent_obs,
                &train_w,
                &val_w,
                &outer_cfg,
                mix(&[cfg.seed, TAG_OUTER, round as u64]),
                inner_cfg.edge_threshold,
            )?;
            metrics.outer_epochs.push(rep.epochs);
            if rep.diverged {
                log::warn!("outer training diverged in round {round}; kept the best checkpoint");
            }
            if let Some(im) = inner_model.as_mut() {
                for s in snapshots.iter_mut() {
                    if let Some(a) = source.snapshot_logits(s.t) {
                        s.a = a.clone();
                        s.acyclicity_residual = inner::acyclicity(&s.a);
                        s.converged = s.acyclicity_residual <= inner_cfg.atol;
                    }
                }
                let cyclic: Vec<usize> = (0..snapshots.len()).filter(|&k| !is_acyclic(&snapshots[k].a, inner_cfg.edge_threshold)).collect();
                if !cyclic.is_empty() {
                    let sub_blocks: Vec<(usize, Tensor2)> = cyclic.iter().map(|&k| blocks[k].clone()).collect();
                    let sub_start: Vec<DagSnapshot> = cyclic.iter().map(|&k| snapshots[k].clone()).collect();
                    let opts = InnerOptions { seed: mix(&[cfg.seed, TAG_INNER, 1000 + round as u64]), freeze_vae: true };
                    let sub_model = if im.shared { im } else { &mut InnerModel::from_vae(im.vae_for(0).clone()) };
                    let rerun = inner::optimize_inner(sub_model, &sub_blocks, Some(&sub_start), &inner_cfg, opts)?;
                    for (&k, s) in cyclic.iter().zip(rerun.snapshots) {
                        violations.push(Violation {
                            round,
                            t: s.t,
                            residual: sub_start.iter().find(|x| x.t == s.t).map_or(f64::NAN, |x| x.acyclicity_residual),
                            action: if s.converged { "re-projected".into() } else { "re-projection incomplete".into() },
                        });
                        source.insert(s.t, s.a.clone());
                        snapshots[k] = s;
                    }
                }
            }
        }
        Ok(())
    })?;
    completed.push("rounds".to_string());

    let (eval_ts, test_out) = phase(&mut clock, "test", || {
        // Validation-side evaluation uses the observed (locked) series only.
        let val_targets: Vec<(SeriesWindow, SeriesWindow)> =
            split.validation.iter().flat_map(|&r| target_windows(r, outer_cfg.lag, outer_cfg.horizon, None)).collect();
        let val_eval = evaluate_windows(&model, &source, &ae, &z_obs, &latent_obs, &val_targets)?;

        access.unlock_test();
        let full = access.full()?;
        let z = stats.normalize(full);
        let latent = anomaly::encode(&ae, &z)?.values;
        let test_ts = split.indices(RangeKind::Test);
        let mut test_snaps = Vec::new();
        if learned && !test_ts.is_empty() {
            let im = inner_model.as_ref().expect("learned runs own an inner model");
            let mut test_model = InnerModel::from_vae(im.vae_for(0).clone());
            let mut tcfg = inner_cfg.clone();
            tcfg.max_rounds = cfg.inner.max_rounds.max(cfg.inner_rounds * cfg.rounds);
            let opts = InnerOptions { seed: mix(&[cfg.seed, TAG_TEST]), freeze_vae: !cfg.co_train_vae };
            let run = inner::optimize_inner(&mut test_model, &inner::latent_blocks(&latent, test_ts.iter().copied()), None, &tcfg, opts)?;
            for s in &run.snapshots {
                source.insert(s.t, s.a.clone());
            }
            test_snaps = run.snapshots;
        }
        let test_targets: Vec<(SeriesWindow, SeriesWindow)> =
            split.test.iter().flat_map(|&r| target_windows(r, outer_cfg.lag, outer_cfg.horizon, None)).collect();
        let test_eval = evaluate_windows(&model, &source, &ae, &z, &latent, &test_targets)?;
        Ok((test_snaps, (val_eval, test_eval, z, test_targets)))
    })?;
    completed.push("test".to_string());
    let (val_eval, test_eval, z_full, test_targets) = test_out;

    if !val_eval.truth.is_empty() {
        metrics.validation_mae.insert("model".into(), eval::frames_mae(&val_eval.model, &val_eval.truth));
        metrics.validation_mae.insert("persistence".into(), eval::frames_mae(&val_eval.persistence, &val_eval.truth));
        metrics.validation_mae.insert("model_latent".into(), eval::frames_mae(&val_eval.latent_model, &val_eval.latent_truth));
        metrics.blend = Some(eval::select_blend(&val_eval.model, &val_eval.persistence, &val_eval.truth));
    }
    if !test_eval.truth.is_empty() {
        metrics.test_blend_table = eval::select_blend(&test_eval.model, &test_eval.persistence, &test_eval.truth).table;
        let blend_weight = metrics.blend.as_ref().map(|b| b.weight);
        let mut record = |name: &str, pred: &[Tensor2], truth: &[Tensor2], stats: Option<&NormStats>| -> Result<()> {
            let score = eval::score_forecast(&frames_series(pred)?, &frames_series(truth)?, stats)?;
            metrics.test_mae.insert(name.to_string(), score.mae);
            metrics.test_forecast.insert(name.to_string(), score);
            Ok(())
        };
        record("model", &test_eval.model, &test_eval.truth, Some(&stats))?;
        record("persistence", &test_eval.persistence, &test_eval.truth, Some(&stats))?;
        record("model_latent", &test_eval.latent_model, &test_eval.latent_truth, None)?;
        if let Some(w) = blend_weight {
            let blended: Vec<Tensor2> = test_eval.model.iter().zip(&test_eval.persistence).map(|(m, p)| m.scale(w).add(&p.scale(1.0 - w))).collect();
            record("blend", &blended, &test_eval.truth, Some(&stats))?;
        }
        let var_lag = outer_cfg.lag.min(8);
        if let Ok(var) = eval::VarBaseline::fit(&z_full, var_lag, &split.train, 1e-6) {
            let usable: Vec<_> = test_targets.iter().filter(|w| w.1.start >= var_lag).collect();
            let pred: Vec<Tensor2> = usable.iter().flat_map(|w| var.forecast_window(&z_full, w.1)).collect();
            let truth_f: Vec<Tensor2> = usable.iter().flat_map(|w| w.1.range().map(|t| z_full.frame(t))).collect();
            if !pred.is_empty() {
                record("var", &pred, &truth_f, Some(&stats))?;
            }
        }
    }

    if let Some(labels) = labels {
        let test_ranges = &split.test;
        if let Some(&(a, b)) = test_ranges.first() {
            let val_normals: Vec<f64> = {
                let mut v = Vec::new();
                for &(va, vb) in &split.validation {
                    let cells = anomaly::score_cells(&ae, &z_full.slice_time(va, vb), ScoreSpace::Decoded)?;
                    for (i, row) in cells.iter().enumerate() {
                        v.extend(row.iter().enumerate().filter(|(k, _)| !labels[i][va + k]).map(|(_, s)| *s));
                    }
                }
                v
            };
            let threshold = anomaly::fit_threshold(&val_normals, cfg.anomaly.quantile);
            let grid: Vec<Vec<bool>> = labels.iter().map(|r| r[a..b].to_vec()).collect();
            let input = match (cfg.anomaly.input, cfg.anomaly.space) {
                (AnomalyInput::Observed, ScoreSpace::Decoded) => z_full.slice_time(a, b),
                (AnomalyInput::Observed, ScoreSpace::Latent) => anomaly::encode(&ae, &z_full.slice_time(a, b))?.values,
                (AnomalyInput::Forecast, space) => {
                    let frames: Vec<Tensor2> = match space {
                        ScoreSpace::Decoded => test_eval.model.clone(),
                        ScoreSpace::Latent => test_eval.latent_model.clone(),
                    };
                    let covered: Vec<usize> = test_targets.iter().flat_map(|w| w.1.range()).collect();
                    let meta = z_full.slice_time(a, a + frames.len().min(b - a)).meta().clone();
                    let series = TensorSeries::from_frames(&frames, meta)?;
                    let grid_f: Vec<Vec<bool>> = labels.iter().map(|r| covered.iter().map(|&t| r[t]).collect()).collect();
                    let th = if space == ScoreSpace::Decoded { threshold } else { None };
                    let rep = anomaly::score_anomalies(&ae, &series, space, Some(&grid_f), th, false)?;
                    metrics.anomaly = Some(rep);
                    series
                }
            };
            if metrics.anomaly.is_none() {
                let th = if cfg.anomaly.space == ScoreSpace::Decoded { threshold } else { None };
                metrics.anomaly = Some(anomaly::score_anomalies(&ae, &input, cfg.anomaly.space, Some(&grid), th, false)?);
            }
        }
    }

    let train_ts = split.indices(RangeKind::Train);
    let adj: Vec<Tensor2> = train_ts.iter().map(|&t| source.evaluate(t)).collect::<Result<_>>()?;
    let scores = model.granger_scores(&adj);
    if let Some(truth) = truth {
        metrics.structure = Some(eval::score_structure(&scores, truth, cfg.include_diagonal, None)?);
    }
    metrics.granger_scores = (0..scores.rows()).map(|j| scores.row(j).to_vec()).collect();

    let mut all_snaps = snapshots.clone();
    all_snaps.extend(eval_ts);
    all_snaps.sort_by_key(|s| s.t);
    metrics.snapshots_total = all_snaps.len();
    metrics.snapshots_converged = all_snaps.iter().filter(|s| s.converged).count();
    for s in all_snaps.iter().filter(|s| !s.converged) {
        violations.push(Violation { round: cfg.rounds, t: s.t, residual: s.acyclicity_residual, action: "flagged non-acyclic".into() });
    }

    artifacts.insert("ae.ckpt".into(), ae.checkpoint().to_bytes());
    if let Some(im) = &inner_model {
        let stores: Vec<(String, &crate::diffkit::ParamStore)> = im.vaes.iter().enumerate().map(|(k, v)| (format!("vae{k}"), &v.store)).collect();
        let refs: Vec<(&str, &crate::diffkit::ParamStore)> = stores.iter().map(|(k, s)| (k.as_str(), *s)).collect();
        artifacts.insert("inner.ckpt".into(), Checkpoint::from_stores(&refs).to_bytes());
    }
    let mut granger_stores = vec![("model", &model.store), ("ae", &ae.store)];
    if let Some(s) = source.store() {
        granger_stores.push(("adj", s));
    }
    artifacts.insert("granger.ckpt".into(), Checkpoint::from_stores(&granger_stores).to_bytes());
    artifacts.insert("granger.json".into(), serde_json::to_vec_pretty(&GrangerSidecar::new(&model, &outer_cfg, &source, &stats, cfg.ae.activation))?);
    let (summaries, tts) = inner::export_snapshots(&all_snaps, inner_cfg.edge_threshold)?;
    if !tts.is_empty() {
        artifacts.insert("snapshots.tts".into(), tts);
    }
    artifacts.insert("snapshots.json".into(), serde_json::to_vec_pretty(&summaries)?);

    let digests = artifacts.iter().map(|(k, v)| (k.clone(), sha256_hex(v))).collect();
    let checkpoints = artifacts.keys().map(|k| (k.clone(), k.clone())).collect();
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        status: "complete".into(),
        completed_phases: completed,
        metrics,
        checkpoints,
        digests,
        acyclicity_violations: violations,
        wall_clock: clock,
    };
    Ok(RunOutcome { manifest, stats, autoencoder: ae, inner: inner_model, snapshots: all_snaps, model, source, split, artifacts })
}

/// Everything needed to rebuild a forecaster from `granger.ckpt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrangerSidecar {
    pub config: OuterConfig,
    pub h_dim: usize,
    pub n: usize,
    pub adjacency: String,
    /// Adjacency reused for every input step when forecasting new data.
    pub default_adjacency: Tensor2,
    pub norm: NormStats,
    pub ae_activation: crate::diffkit::Activation,
}

impl GrangerSidecar {
    fn new(model: &GrangerModel, cfg: &OuterConfig, source: &AdjacencySource, stats: &NormStats, ae_activation: crate::diffkit::Activation) -> Self {
        let ts = source.timestamps();
        let default_adjacency = match source {
            AdjacencySource::Static(a) => a.clone(),
            AdjacencySource::Learned { .. } => {
                let n = source.offset().map_or(0, Tensor2::rows);
                let mut acc = Tensor2::zeros(n, n);
                for &t in &ts {
                    if let Ok(a) = source.evaluate(t) {
                        acc.add_assign(&a);
                    }
                }
                if ts.is_empty() { acc } else { acc.scale(1.0 / ts.len() as f64) }
            }
        };
        Self {
            config: cfg.clone(),
            h_dim: model.h_dim,
            n: default_adjacency.rows(),
            adjacency: match source {
                AdjacencySource::Static(_) => "random_static".into(),
                AdjacencySource::Learned { .. } => "learned".into(),
            },
            default_adjacency,
            norm: stats.clone(),
            ae_activation,
        }
    }
}

/// A trained forecaster restored from `granger.ckpt` and its JSON sidecar.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub model: GrangerModel,
    pub autoencoder: FeatureAutoencoder,
    pub sidecar: GrangerSidecar,
}

impl Forecaster {
    pub fn from_parts(ck: &Checkpoint, sidecar: GrangerSidecar, ae_activation: crate::diffkit::Activation) -> Result<Self> {
        let mut store = crate::diffkit::ParamStore::new();
        for (name, value) in &ck.entries {
            if let Some(rest) = name.strip_prefix("model.") {
                store.add(rest, value.clone());
            }
        }
        let c = &sidecar.config;
        let model = GrangerModel::from_store(store, c.k, c.lag, c.candidate)?;
        let autoencoder = FeatureAutoencoder::from_checkpoint(ck, ae_activation)?;
        Ok(Self { model, autoencoder, sidecar })
    }

    /// Loads `path` and the sidecar at `path` with a `.json` extension.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let sidecar: GrangerSidecar = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        let act = sidecar.ae_activation;
        Self::from_parts(&ck, sidecar, act)
    }

    /// Forecasts `horizon` steps (default: the trained horizon) after the last
    /// `lag` steps of `input`, in raw units. Timestamps continue the input stride.
    pub fn predict(&self, input: &TensorSeries, horizon: Option<usize>) -> Result<TensorSeries> {
        let lag = self.model.lag;
        let horizon = horizon.unwrap_or(self.sidecar.config.horizon);
        if input.t() < lag {
            return Err(Error::Contract(format!("input has {} steps, the model needs {lag}", input.t())));
        }
        if input.n() != self.sidecar.n || input.d() != self.autoencoder.d {
            return Err(Error::Contract(format!("input shape {:?} does not match the model", input.shape())));
        }
        let z = self.sidecar.norm.normalize(&input.slice_time(input.t() - lag, input.t()));
        let frames: Vec<Tensor2> = (0..lag).map(|k| self.autoencoder.encode_rows(&z.frame(k))).collect();
        let adj = vec![self.sidecar.default_adjacency.clone(); lag];
        let out: Vec<Tensor2> = self.model.forecast(&adj, &frames, horizon)?.iter().map(|h| self.autoencoder.decode_rows(h)).collect();
        let ts = &input.meta().timestamps;
        let step = if ts.len() > 1 { ts[1] - ts[0] } else { 1 };
        let last = *ts.last().expect("non-empty input");
        let meta = crate::tensor::AxisMeta {
            location_ids: input.meta().location_ids.clone(),
            feature_names: input.meta().feature_names.clone(),
            timestamps: (1..=horizon as i64).map(|h| last + h * step).collect(),
        };
        Ok(self.sidecar.norm.denormalize(&TensorSeries::from_frames(&out, meta)?))
    }
}

/// Reads inputs named in the config, runs, and writes artifacts plus
/// `manifest.json` into `output_dir`. On failure a manifest with the error
/// status is still written.
pub fn run_from_config(cfg: &RunConfig, base: &Path) -> Result<RunManifest> {
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    let input = cfg.input.as_ref().ok_or_else(|| Error::Config("config needs `input`".into()))?;
    let out_dir = resolve(cfg.output_dir.as_ref().ok_or_else(|| Error::Config("config needs `output_dir`".into()))?);
    std::fs::create_dir_all(&out_dir)?;
    let bytes = std::fs::read(resolve(input))?;
    let data = crate::tensor::read_tts(&bytes, Default::default())?;
    let labels = match &cfg.labels {
        Some(p) => Some(anomaly::read_labels(&std::fs::read_to_string(resolve(p))?, data.meta())?),
        None => None,
    };
    let truth = match &cfg.truth {
        Some(p) => Some(GroundTruthGraph::from_json(&std::fs::read_to_string(resolve(p))?)?),
        None => None,
    };
    let ae_path = out_dir.join("ae.ckpt");
    let pretrained = if cfg.resume && ae_path.exists() {
        log::info!("resuming with {}", ae_path.display());
        Some(FeatureAutoencoder::from_checkpoint(&Checkpoint::load(&ae_path)?, cfg.ae.activation)?)
    } else {
        None
    };
    match run_with(cfg, &data, labels.as_deref(), truth.as_ref(), pretrained) {
        Ok(outcome) => {
            for (name, bytes) in &outcome.artifacts {
                std::fs::write(out_dir.join(name), bytes)?;
            }
            std::fs::write(out_dir.join("run.toml"), cfg.to_toml()?)?;
            std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&outcome.manifest)? + "\n")?;
            Ok(outcome.manifest)
        }
        Err(e) => {
            let manifest = RunManifest {
                config_hash: cfg.hash(),
                status: format!("failed: {e}"),
                completed_phases: Vec::new(),
                metrics: RunMetrics::default(),
                checkpoints: BTreeMap::new(),
                digests: BTreeMap::new(),
                acyclicity_violations: Vec::new(),
                wall_clock: BTreeMap::new(),
            };
            std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
            Err(e)
        }
    }
}
