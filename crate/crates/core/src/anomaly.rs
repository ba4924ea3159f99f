//! Feature autoencoder and reconstruction-error anomaly scoring.
//!
//! The autoencoder maps each location's `D` features at one timestamp to an
//! `H_dim` latent vector and back. Extreme values lie off the manifold it
//! learned from ordinary data, so their reconstruction error is large; scores
//! are only ranked, never calibrated.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkit::checkpoint::sha256_hex;
use crate::diffkit::{Activation, AdamConfig, Checkpoint, Graph, Mlp2, ParamStore, Tensor2};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{AxisMeta, TensorSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    /// Latent width; `None` keeps `D`.
    pub h_dim: Option<usize>,
    pub hidden: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self { h_dim: None, hidden: 32, activation: Activation::Tanh, epochs: 50, lr: 1e-2, batch: 256 }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureAutoencoder {
    pub store: ParamStore,
    pub encoder: Mlp2,
    pub decoder: Mlp2,
    pub d: usize,
    pub h_dim: usize,
}

impl FeatureAutoencoder {
    pub fn new(d: usize, h_dim: usize, hidden: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = rng_for(&[seed, 0xae]);
        let mut store = ParamStore::new();
        let encoder = Mlp2::new(&mut store, "enc", (d, hidden, h_dim), activation, &mut rng);
        let decoder = Mlp2::new(&mut store, "dec", (h_dim, hidden, d), activation, &mut rng);
        Self { store, encoder, decoder, d, h_dim }
    }

    /// Identity-weight encoder and decoder of width `d`.
    pub fn identity(d: usize, activation: Activation) -> Self {
        let mut store = ParamStore::new();
        let encoder = Mlp2::identity(&mut store, "enc", d, activation);
        let decoder = Mlp2::identity(&mut store, "dec", d, activation);
        Self { store, encoder, decoder, d, h_dim: d }
    }

    pub fn from_checkpoint(ck: &Checkpoint, activation: Activation) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, value) in &ck.entries {
            if let Some(rest) = name.strip_prefix("ae.") {
                store.add(rest, value.clone());
            }
        }
        let missing = || Error::Contract("checkpoint lacks autoencoder parameters".into());
        let encoder = Mlp2::bind(&store, "enc", activation).ok_or_else(missing)?;
        let decoder = Mlp2::bind(&store, "dec", activation).ok_or_else(missing)?;
        Ok(Self { d: encoder.input, h_dim: encoder.output, store, encoder, decoder })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_stores(&[("ae", &self.store)])
    }

    pub fn encode_rows(&self, x: &Tensor2) -> Tensor2 {
        self.encoder.eval(&self.store, x)
    }

    pub fn decode_rows(&self, h: &Tensor2) -> Tensor2 {
        self.decoder.eval(&self.store, h)
    }

    /// Mean squared reconstruction error over every entry of `rows`.
    pub fn mse(&self, rows: &Tensor2) -> f64 {
        if rows.rows() == 0 {
            return f64::NAN;
        }
        let r = self.decode_rows(&self.encode_rows(rows));
        r.sub(rows).map(|v| v * v).sum() / rows.data().len() as f64
    }
}

/// Latent series with a record of what produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeries {
    pub values: TensorSeries,
    pub source_digest: String,
    pub checkpoint_digest: String,
}

/// Every `(location, timestamp)` feature vector of `ts` over `ranges`, one per row.
pub fn sample_rows(ts: &TensorSeries, ranges: &[(usize, usize)]) -> Tensor2 {
    let mut data = Vec::new();
    let mut count = 0;
    for &(a, b) in ranges {
        for k in a..b {
            for i in 0..ts.n() {
                data.extend((0..ts.d()).map(|j| ts.get(i, j, k)));
                count += 1;
            }
        }
    }
    Tensor2::from_vec(count, ts.d(), data)
}

fn series_digest(ts: &TensorSeries) -> String {
    let bytes: Vec<u8> = ts.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

fn map_series(ts: &TensorSeries, width: usize, names: Vec<String>, f: impl Fn(&Tensor2) -> Tensor2) -> Result<TensorSeries> {
    let frames: Vec<Tensor2> = (0..ts.t()).map(|k| f(&ts.frame(k))).collect();
    let meta = AxisMeta { location_ids: ts.meta().location_ids.clone(), feature_names: names, timestamps: ts.meta().timestamps.clone() };
    debug_assert!(frames.iter().all(|fr| fr.cols() == width));
    Ok(TensorSeries::from_frames(&frames, meta)?)
}

pub fn encode(ae: &FeatureAutoencoder, ts: &TensorSeries) -> Result<LatentSeries> {
    if ts.d() != ae.d {
        return Err(Error::Contract(format!("autoencoder expects D = {}, series has D = {}", ae.d, ts.d())));
    }
    let names = (0..ae.h_dim).map(|j| format!("h{j}")).collect();
    let values = map_series(ts, ae.h_dim, names, |f| ae.encode_rows(f))?;
    Ok(LatentSeries { values, source_digest: series_digest(ts), checkpoint_digest: ae.checkpoint().digest() })
}

pub fn decode(ae: &FeatureAutoencoder, h: &TensorSeries, feature_names: Option<Vec<String>>) -> Result<TensorSeries> {
    if h.d() != ae.h_dim {
        return Err(Error::Contract(format!("autoencoder expects H_dim = {}, latent has {}", ae.h_dim, h.d())));
    }
    let names = feature_names.unwrap_or_else(|| (0..ae.d).map(|j| format!("f{j}")).collect());
    map_series(h, ae.d, names, |f| ae.decode_rows(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub diverged: bool,
}

/// Fits the autoencoder on `train` ranges by minibatch Adam on reconstruction MSE.
/// On a non-finite loss the last finite parameters are restored and training stops.
pub fn pretrain(
    ts: &TensorSeries,
    train: &[(usize, usize)],
    validation: &[(usize, usize)],
    cfg: &AeConfig,
    seed: u64,
) -> Result<(FeatureAutoencoder, PretrainReport)> {
    let rows = sample_rows(ts, train);
    if rows.rows() == 0 {
        return Err(Error::Config("autoencoder pretraining needs a non-empty training range".into()));
    }
    let val_rows = sample_rows(ts, validation);
    let h_dim = cfg.h_dim.unwrap_or(ts.d());
    let mut ae = FeatureAutoencoder::new(ts.d(), h_dim, cfg.hidden, cfg.activation, seed);
    let report = fit_rows(&mut ae, &rows, &val_rows, cfg, seed)?;
    Ok((ae, report))
}

/// Trains an existing autoencoder on explicit sample rows.
pub fn fit_rows(ae: &mut FeatureAutoencoder, rows: &Tensor2, val_rows: &Tensor2, cfg: &AeConfig, seed: u64) -> Result<PretrainReport> {
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut report = PretrainReport { train_mse: Vec::new(), val_mse: Vec::new(), diverged: false };
    let mut order: Vec<usize> = (0..rows.rows()).collect();
    let batch = cfg.batch.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(&[seed, 0xa0, epoch as u64]));
        let last_good = ae.store.clone();
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let x = Tensor2::from_fn(chunk.len(), rows.cols(), |r, c| rows[(chunk[r], c)]);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let h = ae.encoder.forward(&mut g, &ae.store, xv);
            let y = ae.decoder.forward(&mut g, &ae.store, h);
            let d = g.sub(y, xv);
            let s = g.square(d);
            let loss = g.mean(s);
            let value = g.scalar(loss);
            if !value.is_finite() {
                report.diverged = true;
                break;
            }
            total += value * chunk.len() as f64;
            let grads = g.backward(loss);
            ae.store.zero_grad();
            for (id, gr) in g.param_grads(&grads, &ae.store) {
                ae.store.accumulate(id, &gr);
            }
            ae.store.adam_step(&adam);
        }
        if report.diverged || !ae.store.all_finite() {
            report.diverged = true;
            ae.store = last_good;
            log::warn!("autoencoder pretraining diverged at epoch {epoch}; restored previous parameters");
            break;
        }
        report.train_mse.push(total / rows.rows() as f64);
        if val_rows.rows() > 0 {
            report.val_mse.push(ae.mse(val_rows));
        }
    }
    Ok(report)
}

/// Where reconstruction error is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSpace {
    /// Feature space: `x` vs `dec(enc(x))`.
    #[default]
    Decoded,
    /// Latent space: `h` vs `enc(dec(h))`.
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    /// `scores[i][k]`: error at location `i`, step `k`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<Vec<f64>>>,
    pub auc_roc: Option<f64>,
    /// Why the AUC is missing, when it is.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_note: Option<String>,
    pub threshold: Option<f64>,
    pub confusion: Option<Confusion>,
    pub space: ScoreSpace,
    pub count: usize,
}

/// Per-cell mean squared error between `input` and its regeneration.
pub fn score_cells(ae: &FeatureAutoencoder, input: &TensorSeries, space: ScoreSpace) -> Result<Vec<Vec<f64>>> {
    let width = match space {
        ScoreSpace::Decoded => ae.d,
        ScoreSpace::Latent => ae.h_dim,
    };
    if input.d() != width {
        return Err(Error::Contract(format!("{space:?} scoring expects {width} features, got {}", input.d())));
    }
    let mut scores = vec![vec![0.0; input.t()]; input.n()];
    for k in 0..input.t() {
        let x = input.frame(k);
        let regen = match space {
            ScoreSpace::Decoded => ae.decode_rows(&ae.encode_rows(&x)),
            ScoreSpace::Latent => ae.encode_rows(&ae.decode_rows(&x)),
        };
        for (i, row) in scores.iter_mut().enumerate() {
            row[k] = x.row(i).iter().zip(regen.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / width as f64;
        }
    }
    Ok(scores)
}

/// AUC-ROC by the Mann-Whitney rank statistic, ties sharing average ranks.
/// `None` when either class is empty.
pub fn auc_rank(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC-ROC by sweeping every distinct score as a threshold and integrating the
/// ROC curve with trapezoids.
pub fn auc_sweep(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev = (0.0, 0.0);
    let mut area = 0.0;
    for th in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= th).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= th).count() as f64;
        let pt = (fp / neg, tp / pos);
        area += (pt.0 - prev.0) * (pt.1 + prev.1) / 2.0;
        prev = pt;
    }
    Some(area)
}

/// The `q`-quantile (linear interpolation) of `normal_scores`.
pub fn fit_threshold(normal_scores: &[f64], q: f64) -> Option<f64> {
    if normal_scores.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut s = normal_scores.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

/// Scores every cell of `input`, and with labels also the AUC and, given a
/// threshold, the confusion counts.
pub fn score_anomalies(
    ae: &FeatureAutoencoder,
    input: &TensorSeries,
    space: ScoreSpace,
    labels: Option<&[Vec<bool>]>,
    threshold: Option<f64>,
    keep_scores: bool,
) -> Result<AnomalyReport> {
    let scores = score_cells(ae, input, space)?;
    let flat: Vec<f64> = scores.iter().flatten().copied().collect();
    let mut report = AnomalyReport {
        scores: None,
        auc_roc: None,
        auc_note: None,
        threshold,
        confusion: None,
        space,
        count: flat.len(),
    };
    if let Some(labels) = labels {
        if labels.len() != input.n() || labels.iter().any(|r| r.len() != input.t()) {
            return Err(Error::Contract(format!("label grid must be {} x {}", input.n(), input.t())));
        }
        let lab: Vec<bool> = labels.iter().flatten().copied().collect();
        report.auc_roc = auc_rank(&flat, &lab);
        if report.auc_roc.is_none() {
            report.auc_note = Some("labels are all one class; AUC-ROC undefined".into());
        }
        if let Some(th) = threshold {
            let mut c = Confusion::default();
            for (s, l) in flat.iter().zip(&lab) {
                match (*s > th, *l) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, false) => c.tn += 1,
                    (false, true) => c.fn_ += 1,
                }
            }
            report.confusion = Some(c);
        }
    }
    if keep_scores {
        report.scores = Some(scores);
    }
    Ok(report)
}

/// Metadata written next to a standalone autoencoder checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeSidecar {
    pub config: AeConfig,
    pub norm: crate::tensor::NormStats,
    pub train: Vec<(usize, usize)>,
    pub validation: Vec<(usize, usize)>,
    pub quantile: f64,
    /// Quantile of validation reconstruction scores; `None` without validation data.
    pub threshold: Option<f64>,
    pub report: PretrainReport,
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRecord {
    location_id: String,
    timestamp: i64,
    label: u8,
}

/// Reads `location_id,timestamp,label` rows onto the grid given by `meta`.
/// Cells without a row are labeled 0.
pub fn read_labels(text: &str, meta: &AxisMeta) -> Result<Vec<Vec<bool>>> {
    let loc: HashMap<&str, usize> = meta.location_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let step: HashMap<i64, usize> = meta.timestamps.iter().enumerate().map(|(k, &t)| (t, k)).collect();
    let mut grid = vec![vec![false; meta.timestamps.len()]; meta.location_ids.len()];
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    for (line, rec) in reader.deserialize::<LabelRecord>().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("label CSV row {}: {e}", line + 2)))?;
        let i = *loc.get(rec.location_id.as_str()).ok_or_else(|| Error::Parse(format!("unknown location {}", rec.location_id)))?;
        let k = *step.get(&rec.timestamp).ok_or_else(|| Error::Parse(format!("timestamp {} not on the series grid", rec.timestamp)))?;
        if rec.label > 1 {
            return Err(Error::Parse(format!("label must be 0 or 1, got {}", rec.label)));
        }
        grid[i][k] = rec.label == 1;
    }
    Ok(grid)
}

/// Writes every cell of the grid as a label row.
pub fn write_labels(grid: &[Vec<bool>], meta: &AxisMeta) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (i, row) in grid.iter().enumerate() {
        for (k, &l) in row.iter().enumerate() {
            w.serialize(LabelRecord { location_id: meta.location_ids[i].clone(), timestamp: meta.timestamps[k], label: u8::from(l) })
                .map_err(|e| Error::Parse(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

/// Low-rank multi-feature series with injected extreme events: each location
/// draws `rank` AR(1) factors mixed into `d` features plus small noise; a
/// fraction `rate` of cells gets one feature shifted by `magnitude` standard
/// deviations. Returns the series and the event grid.
pub fn synthetic_events(n: usize, d: usize, t: usize, rank: usize, rate: f64, magnitude: f64, seed: u64) -> Result<(TensorSeries, Vec<Vec<bool>>)> {
    use rand_distr::StandardNormal;
    let mut rng = rng_for(&[seed, 0xe7]);
    let mix = Tensor2::from_fn(rank, d, |_, _| rng.sample::<f64, _>(StandardNormal) / (rank as f64).sqrt());
    let mut values = vec![0.0; n * d * t];
    for i in 0..n {
        let mut f = vec![0.0; rank];
        for k in 0..t {
            for v in f.iter_mut() {
                *v = 0.9 * *v + (1.0f64 - 0.81).sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
            for j in 0..d {
                let clean: f64 = (0..rank).map(|r| f[r] * mix[(r, j)]).sum();
                values[(i * d + j) * t + k] = clean + 0.05 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let mut ts = TensorSeries::with_default_meta(n, d, t, values)?;
    let mut std = vec![0.0; d];
    for (j, s) in std.iter_mut().enumerate() {
        let vals: Vec<f64> = (0..n).flat_map(|i| (0..t).map(move |k| (i, k))).map(|(i, k)| ts.get(i, j, k)).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        *s = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt();
    }
    let mut labels = vec![vec![false; t]; n];
    for (i, row) in labels.iter_mut().enumerate() {
        for (k, cell) in row.iter_mut().enumerate() {
            if rng.random_bool(rate) {
                let j = rng.random_range(0..d);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                ts.set(i, j, k, ts.get(i, j, k) + sign * magnitude * std[j]);
                *cell = true;
            }
        }
    }
    Ok((ts, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        assert_eq!(auc_rank(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(auc_rank(&[0.9, 0.1], &[true, true]), None);
    }

    #[test]
    fn ties_count_half() {
        let s = [1.0, 1.0, 0.0, 2.0];
        let l = [true, false, false, true];
        assert_eq!(auc_rank(&s, &l), Some(0.875));
        assert_eq!(auc_sweep(&s, &l), Some(0.875));
    }

    #[test]
    fn threshold_quantile() {
        let s: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(fit_threshold(&s, 0.995), Some(99.5));
    }

    #[test]
    fn label_csv_roundtrip() {
        let meta = AxisMeta { location_ids: vec!["a".into(), "b".into()], feature_names: vec!["f".into()], timestamps: vec![10, 11, 12] };
        let grid = vec![vec![false, true, false], vec![true, false, false]];
        let text = write_labels(&grid, &meta).unwrap();
        assert!(text.starts_with("location_id,timestamp,label"));
        assert_eq!(read_labels(&text, &meta).unwrap(), grid);
        assert!(read_labels("location_id,timestamp,label\nz,10,1\n", &meta).is_err());
    }

    #[test]
    fn linear_identity_reconstructs_exactly() {
        let ae = FeatureAutoencoder::identity(3, Activation::Linear);
        let x = Tensor2::from_fn(4, 3, |r, c| (r * 3 + c) as f64 - 5.0);
        assert_eq!(ae.mse(&x), 0.0);
    }

    #[test]
    fn zero_input_latent_is_bias_path() {
        let ae = FeatureAutoencoder::new(3, 2, 4, Activation::Tanh, 1);
        let z = Tensor2::zeros(1, 3);
        let h = ae.encode_rows(&z);
        let b2 = ae.store.value(ae.encoder.b2);
        let b1 = ae.store.value(ae.encoder.b1).map(f64::tanh);
        assert_eq!(h, b1.matmul(ae.store.value(ae.encoder.w2)).add(b2));
        assert_eq!(h, ae.encode_rows(&z));
    }
}
