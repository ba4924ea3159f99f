//! Metrics, baselines, the persistence blend and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anomaly::{auc_rank, AnomalyReport};
use crate::diffkit::{solve, Tensor2};
use crate::error::{Error, Result};
use crate::synth::GroundTruthGraph;
use crate::tensor::{NormStats, SeriesWindow, TensorSeries};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureScore {
    pub auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc_note: Option<String>,
    /// Threshold maximizing balanced accuracy on the selection cells.
    pub threshold: f64,
    /// Cellwise 0/1 accuracy at `threshold`.
    pub accuracy_at_threshold: f64,
    /// Edge-set F1 at `threshold`.
    pub f1_at_threshold: f64,
    pub sweep: Vec<SweepRow>,
    pub diagonal_included: bool,
}

fn cells(pred: &Tensor2, truth: &GroundTruthGraph, diagonal: bool) -> Result<(Vec<f64>, Vec<bool>)> {
    let n = truth.size();
    if pred.shape() != (n, n) {
        return Err(Error::Contract(format!("predicted {:?} vs truth {n}x{n}", pred.shape())));
    }
    let mut s = Vec::new();
    let mut l = Vec::new();
    for j in 0..n {
        for i in 0..n {
            if diagonal || i != j {
                s.push(pred[(j, i)]);
                l.push(truth.is_edge(j, i));
            }
        }
    }
    Ok((s, l))
}

fn rates(scores: &[f64], labels: &[bool], th: f64) -> SweepRow {
    let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= th, *l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let tpr = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let tnr = if tn + fp > 0.0 { tn / (tn + fp) } else { 0.0 };
    let f1 = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
    SweepRow { threshold: th, accuracy: (tp + tn) / scores.len().max(1) as f64, balanced_accuracy: (tpr + tnr) / 2.0, f1 }
}

fn sweep(scores: &[f64], labels: &[bool]) -> Vec<SweepRow> {
    let mut th: Vec<f64> = scores.to_vec();
    th.sort_by(f64::total_cmp);
    th.dedup();
    th.push(f64::MAX);
    th.into_iter().map(|t| rates(scores, labels, t)).collect()
}

/// Scores a weighted (or 0/1) prediction `pred[(j, i)]` for edge `j -> i`.
/// The threshold is chosen on `selection` (a validation fold) when given,
/// otherwise on the scored cells themselves.
pub fn score_structure(
    pred: &Tensor2,
    truth: &GroundTruthGraph,
    include_diagonal: bool,
    selection: Option<(&Tensor2, &GroundTruthGraph)>,
) -> Result<StructureScore> {
    let (s, l) = cells(pred, truth, include_diagonal)?;
    let auroc = auc_rank(&s, &l);
    let table = sweep(&s, &l);
    let pick_from = match selection {
        Some((p, t)) => {
            let (ss, ll) = cells(p, t, include_diagonal)?;
            sweep(&ss, &ll)
        }
        None => table.clone(),
    };
    let best = pick_from
        .iter()
        .fold(None::<&SweepRow>, |b, r| match b {
            Some(b) if b.balanced_accuracy >= r.balanced_accuracy => Some(b),
            _ => Some(r),
        })
        .map_or(f64::MAX, |r| r.threshold);
    let at = rates(&s, &l, best);
    Ok(StructureScore {
        auroc_note: auroc.is_none().then(|| "truth has a single class on the scored cells; AUROC undefined".to_string()),
        auroc,
        threshold: best,
        accuracy_at_threshold: at.accuracy,
        f1_at_threshold: at.f1,
        sweep: table,
        diagonal_included: include_diagonal,
    })
}

/// `a * forecast + (1 - a) * last_window`, elementwise.
pub fn persistence_blend(forecast: &TensorSeries, last_window: &TensorSeries, a: f64) -> Result<TensorSeries> {
    if forecast.shape() != last_window.shape() {
        return Err(Error::Contract(format!("blend shapes {:?} vs {:?}", forecast.shape(), last_window.shape())));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Contract(format!("blend weight {a} outside [0, 1]")));
    }
    let values = forecast.values().iter().zip(last_window.values()).map(|(f, p)| a * f + (1.0 - a) * p).collect();
    Ok(TensorSeries::new(forecast.n(), forecast.d(), forecast.t(), values, forecast.meta().clone())?)
}

fn blend_frames(model: &[Tensor2], persist: &[Tensor2], a: f64) -> Vec<Tensor2> {
    model.iter().zip(persist).map(|(m, p)| m.scale(a).add(&p.scale(1.0 - a))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendSelection {
    pub weight: f64,
    pub validation_mae: f64,
    /// `(a, validation MAE)` for every grid point.
    pub table: Vec<(f64, f64)>,
}

/// Picks the blend weight from `{0, 0.1, ..., 1}` minimizing validation MAE.
/// Ties go to the larger weight.
pub fn select_blend(model: &[Tensor2], persist: &[Tensor2], truth: &[Tensor2]) -> BlendSelection {
    let table: Vec<(f64, f64)> = (0..=10)
        .map(|k| {
            let a = k as f64 / 10.0;
            (a, frames_mae(&blend_frames(model, persist, a), truth))
        })
        .collect();
    let (weight, validation_mae) = table.iter().fold((f64::NAN, f64::INFINITY), |b, &(a, m)| if m <= b.1 { (a, m) } else { b });
    BlendSelection { weight, validation_mae, table }
}

/// Mean absolute error over aligned frame lists.
pub fn frames_mae(pred: &[Tensor2], truth: &[Tensor2]) -> f64 {
    let mut s = 0.0;
    let mut c = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        s += p.sub(t).map(f64::abs).sum();
        c += p.data().len();
    }
    s / c as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastScore {
    pub mae: f64,
    pub rmse: f64,
    pub mae_per_feature: Vec<f64>,
    pub rmse_per_feature: Vec<f64>,
    /// Errors in original units (`normalized * std` per feature).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_mae_per_feature: Option<Vec<f64>>,
}

/// MAE and RMSE of normalized-space predictions; with `stats`, raw MAE too.
pub fn score_forecast(pred: &TensorSeries, truth: &TensorSeries, stats: Option<&NormStats>) -> Result<ForecastScore> {
    if pred.shape() != truth.shape() {
        return Err(Error::Contract(format!("forecast {:?} vs truth {:?}", pred.shape(), truth.shape())));
    }
    let (n, d, t) = pred.shape();
    let per = (n * t) as f64;
    let mut mae_f = vec![0.0; d];
    let mut mse_f = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            for k in 0..t {
                let e = pred.get(i, j, k) - truth.get(i, j, k);
                mae_f[j] += e.abs() / per;
                mse_f[j] += e * e / per;
            }
        }
    }
    let mae = mae_f.iter().sum::<f64>() / d as f64;
    let rmse = (mse_f.iter().sum::<f64>() / d as f64).sqrt();
    let raw = stats.map(|s| {
        mae_f.iter().enumerate().map(|(j, m)| if s.constant[j] { *m } else { m * s.std[j] }).collect::<Vec<f64>>()
    });
    Ok(ForecastScore {
        mae,
        rmse,
        rmse_per_feature: mse_f.iter().map(|v| v.sqrt()).collect(),
        mae_per_feature: mae_f,
        raw_mae: raw.as_ref().map(|r| r.iter().sum::<f64>() / d as f64),
        raw_mae_per_feature: raw,
    })
}

/// Persistence for one target window: step `h` copies the frame `tau` steps
/// earlier, i.e. the previous window of the same length. Falls back to the
/// last observed frame when that reaches before the series start.
pub fn persistence_frames(ts: &TensorSeries, target: SeriesWindow) -> Vec<Tensor2> {
    let tau = target.length;
    target
        .range()
        .map(|t| if t >= tau { ts.frame(t - tau) } else { ts.frame(target.start.saturating_sub(1)) })
        .collect()
}

/// Copy-last-window forecasts over `[lag, T)` in consecutive windows of `horizon` steps.
pub fn baseline_persistence(ts: &TensorSeries, lag: usize, horizon: usize) -> Result<TensorSeries> {
    if horizon == 0 || lag >= ts.t() {
        return Err(Error::Contract(format!("persistence needs horizon >= 1 and lag < T (lag {lag}, T {})", ts.t())));
    }
    let mut frames = Vec::new();
    let mut start = lag;
    while start < ts.t() {
        let len = horizon.min(ts.t() - start);
        let mut f = persistence_frames(ts, SeriesWindow { start, length: horizon });
        f.truncate(len);
        frames.extend(f);
        start += horizon;
    }
    let s = ts.slice_time(lag, ts.t());
    Ok(TensorSeries::from_frames(&frames, s.meta().clone())?)
}

/// Least-squares VAR(L) over every (location, feature) channel with an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarBaseline {
    pub lag: usize,
    /// `(L * M + 1) x M` with `M = N * D`: rows are lag-1 channels, lag-2 channels, ..., intercept.
    pub coefficients: Tensor2,
    pub n: usize,
    pub d: usize,
}

fn flat(frame: &Tensor2) -> Vec<f64> {
    frame.data().to_vec()
}

impl VarBaseline {
    /// Fits on every step whose lags fall inside one of `ranges`. `ridge`
    /// regularizes the normal equations.
    pub fn fit(ts: &TensorSeries, lag: usize, ranges: &[(usize, usize)], ridge: f64) -> Result<Self> {
        let m = ts.n() * ts.d();
        let p = lag * m + 1;
        let mut xtx = Tensor2::zeros(p, p);
        let mut xty = Tensor2::zeros(p, m);
        let mut count = 0;
        for &(a, b) in ranges {
            for t in a + lag..b {
                let mut z = Vec::with_capacity(p);
                for l in 1..=lag {
                    z.extend(flat(&ts.frame(t - l)));
                }
                z.push(1.0);
                let y = flat(&ts.frame(t));
                for r in 0..p {
                    if z[r] == 0.0 {
                        continue;
                    }
                    for c in 0..p {
                        xtx[(r, c)] += z[r] * z[c];
                    }
                    for c in 0..m {
                        xty[(r, c)] += z[r] * y[c];
                    }
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Config(format!("no training steps for a VAR({lag}) fit")));
        }
        for r in 0..p {
            xtx[(r, r)] += ridge;
        }
        let coefficients = solve(&xtx, &xty)?;
        Ok(Self { lag, coefficients, n: ts.n(), d: ts.d() })
    }

    /// Recursive forecast of `horizon` frames from `history` (oldest first, at least `lag` frames).
    pub fn forecast(&self, history: &[Tensor2], horizon: usize) -> Vec<Tensor2> {
        let mut hist: Vec<Tensor2> = history[history.len() - self.lag..].to_vec();
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let mut z = Vec::new();
            for l in 1..=self.lag {
                z.extend(flat(&hist[hist.len() - l]));
            }
            z.push(1.0);
            let y = Tensor2::from_vec(1, z.len(), z).matmul(&self.coefficients);
            let frame = Tensor2::from_vec(self.n, self.d, y.into_vec());
            hist.push(frame.clone());
            out.push(frame);
        }
        out
    }

    /// Forecasts for one target window, using the observed frames before it.
    pub fn forecast_window(&self, ts: &TensorSeries, target: SeriesWindow) -> Vec<Tensor2> {
        let hist: Vec<Tensor2> = (target.start - self.lag..target.start).map(|t| ts.frame(t)).collect();
        self.forecast(&hist, target.length)
    }
}

/// One-step VAR(L) predictions over `[lag, T)` after fitting on `train`.
pub fn baseline_var(ts: &TensorSeries, lag: usize, train: &[(usize, usize)]) -> Result<TensorSeries> {
    let var = VarBaseline::fit(ts, lag, train, 1e-9)?;
    let frames: Vec<Tensor2> = (lag..ts.t()).map(|t| var.forecast_window(ts, SeriesWindow { start: t, length: 1 }).remove(0)).collect();
    Ok(TensorSeries::from_frames(&frames, ts.slice_time(lag, ts.t()).meta().clone())?)
}

/// Fraction of all `N^2` cells whose values differ by more than `tol`.
pub fn changed_cell_fraction(a: &Tensor2, b: &Tensor2, tol: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!("adjacency shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    let changed = a.data().iter().zip(b.data()).filter(|(x, y)| (*x - *y).abs() > tol).count();
    Ok(changed as f64 / a.data().len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AurocCell {
    pub p: usize,
    pub t: usize,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyPair {
    pub t1: usize,
    pub t2: usize,
    pub a1: Tensor2,
    pub a2: Tensor2,
    pub changed_fraction: f64,
}

impl AdjacencyPair {
    pub fn new(t1: usize, a1: Tensor2, t2: usize, a2: Tensor2) -> Result<Self> {
        let changed_fraction = changed_cell_fraction(&a1, &a2, 0.0)?;
        Ok(Self { t1, t2, a1, a2, changed_fraction })
    }
}

/// Everything a report can show; absent sections are skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Report {
    pub schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub structure: Option<StructureScore>,
    pub forecast: BTreeMap<String, ForecastScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blend: Option<BlendSelection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly: Option<AnomalyReport>,
    pub loss_curves: BTreeMap<String, Vec<f64>>,
    pub auroc_grid: Vec<AurocCell>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjacency_pair: Option<AdjacencyPair>,
}

impl Report {
    pub fn new() -> Self {
        Self { schema_version: REPORT_SCHEMA_VERSION, ..Default::default() }
    }
}

/// Writes `report.json`, CSV tables and SVG plots into `dir`. The output is a
/// pure function of `report`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        std::fs::write(dir.join(name), body)?;
        written.push(name.to_string());
        Ok(())
    };
    put("report.json", serde_json::to_string_pretty(report)? + "\n")?;

    if !report.forecast.is_empty() {
        let mut csv = String::from("name,mae,rmse,raw_mae\n");
        for (k, f) in &report.forecast {
            let raw = f.raw_mae.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(csv, "{k},{},{},{raw}", f.mae, f.rmse);
        }
        put("forecast.csv", csv)?;
    }
    if let Some(s) = &report.structure {
        let mut csv = String::from("threshold,accuracy,balanced_accuracy,f1\n");
        for r in &s.sweep {
            let _ = writeln!(csv, "{},{},{},{}", r.threshold, r.accuracy, r.balanced_accuracy, r.f1);
        }
        put("structure_sweep.csv", csv)?;
    }
    if let Some(b) = &report.blend {
        let mut csv = String::from("a,validation_mae\n");
        for (a, m) in &b.table {
            let _ = writeln!(csv, "{a},{m}");
        }
        put("blend.csv", csv)?;
    }
    if !report.loss_curves.is_empty() {
        let mut csv = String::from("curve,epoch,value\n");
        for (k, v) in &report.loss_curves {
            for (e, x) in v.iter().enumerate() {
                let _ = writeln!(csv, "{k},{e},{x}");
            }
        }
        put("loss_curves.csv", csv)?;
        put("loss_curves.svg", svg_curves(&report.loss_curves))?;
    }
    if !report.auroc_grid.is_empty() {
        let mut csv = String::from("p,t,auroc\n");
        for c in &report.auroc_grid {
            let _ = writeln!(csv, "{},{},{}", c.p, c.t, c.auroc);
        }
        put("auroc_grid.csv", csv)?;
        put("auroc_grid.svg", svg_grid(&report.auroc_grid))?;
    }
    if let Some(p) = &report.adjacency_pair {
        put("adjacency_pair.svg", svg_heatmaps(p))?;
    }
    Ok(written)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn svg_curves(curves: &BTreeMap<String, Vec<f64>>) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let finite = curves.values().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let longest = curves.values().map(Vec::len).max().unwrap_or(1).max(2);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    for (idx, (name, v)) in curves.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .filter(|(_, y)| y.is_finite())
            .map(|(e, y)| {
                let x = pad + (w - 2.0 * pad) * e as f64 / (longest - 1) as f64;
                let yy = h - pad - (h - 2.0 * pad) * (y - lo) / (hi - lo);
                format!("{x:.2},{yy:.2}")
            })
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>", pad + 4.0, pad - 8.0 + 12.0 * idx as f64);
    }
    let _ = writeln!(s, "<text x=\"{pad}\" y=\"{}\" font-size=\"10\">{lo:.4}</text>", h - pad + 14.0);
    let _ = writeln!(s, "<text x=\"{pad}\" y=\"{}\" font-size=\"10\">{hi:.4}</text>", pad - 26.0 + 12.0);
    s.push_str("</svg>\n");
    s
}

fn cell_color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let c = (255.0 * (1.0 - v)).round() as u8;
    format!("rgb({c},{c},255)")
}

fn svg_grid(grid: &[AurocCell]) -> String {
    let mut ps: Vec<usize> = grid.iter().map(|c| c.p).collect();
    let mut ts: Vec<usize> = grid.iter().map(|c| c.t).collect();
    ps.sort_unstable();
    ps.dedup();
    ts.sort_unstable();
    ts.dedup();
    let cell = 60.0;
    let (w, h) = (80.0 + cell * ts.len() as f64, 40.0 + cell * ps.len() as f64);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    for c in grid {
        let x = 80.0 + cell * ts.iter().position(|&t| t == c.t).unwrap_or(0) as f64;
        let y = 40.0 + cell * ps.iter().position(|&p| p == c.p).unwrap_or(0) as f64;
        let _ = writeln!(s, "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\"/>", cell_color(c.auroc));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\">{:.3}</text>", x + 10.0, y + 34.0, c.auroc);
    }
    for (k, t) in ts.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{}\" y=\"30\" font-size=\"11\">T={t}</text>", 90.0 + cell * k as f64);
    }
    for (k, p) in ps.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"10\" y=\"{}\" font-size=\"11\">P={p}</text>", 74.0 + cell * k as f64);
    }
    s.push_str("</svg>\n");
    s
}

fn svg_heatmaps(pair: &AdjacencyPair) -> String {
    let n = pair.a1.rows();
    let size = 240.0;
    let cell = size / n.max(1) as f64;
    let scale = pair.a1.max_abs().max(pair.a2.max_abs()).max(1e-12);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n", 2.0 * size + 60.0, size + 60.0);
    for (k, (t, a)) in [(pair.t1, &pair.a1), (pair.t2, &pair.a2)].into_iter().enumerate() {
        let ox = 20.0 + k as f64 * (size + 20.0);
        let _ = writeln!(s, "<text x=\"{ox}\" y=\"16\" font-size=\"12\">t = {t}</text>");
        for r in 0..n {
            for c in 0..n {
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{cell:.3}\" height=\"{cell:.3}\" fill=\"{}\"/>",
                    ox + c as f64 * cell,
                    24.0 + r as f64 * cell,
                    cell_color(a[(r, c)].abs() / scale)
                );
            }
        }
    }
    let _ = writeln!(s, "<text x=\"20\" y=\"{}\" font-size=\"12\">changed cells: {:.4}</text>", size + 44.0, pair.changed_fraction);
    s.push_str("</svg>\n");
    s
}
