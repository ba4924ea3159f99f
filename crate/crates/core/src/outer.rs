//! Graph-recurrent Granger forecaster.
//!
//! Each GRU gate mixes its input over the graph with a diffusion polynomial
//! `sum_k theta_{k,1} (D_out^-1 A)^k + theta_{k,2} (D_in^-1 A^T)^k`. The
//! adjacencies come from per-timestamp logits (initialized from the inner
//! snapshots) plus an optional shared offset, relaxed with a binary
//! Gumbel-softmax. An encoder cell reads `L` observed steps; a decoder cell
//! starting from the encoder state emits `tau` steps autoregressively.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffkit::tape::row_normalize;
use crate::diffkit::{mlp::glorot, Activation, AdamConfig, Graph, ParamId, ParamStore, Tensor2, Var};
use crate::error::{Error, Result};
use crate::graph::is_acyclic;
use crate::rng::{mix, rng_for};
use crate::tensor::{SeriesWindow, TensorSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GumbelMode {
    /// Independent edge / no-edge relaxation per cell.
    #[default]
    Binary,
    /// Softmax across each row (over candidate targets of a source).
    Row,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OuterConfig {
    /// Diffusion order `K`.
    pub k: usize,
    pub lag: usize,
    pub horizon: usize,
    pub hidden: usize,
    /// Gumbel temperature.
    pub xi: f64,
    pub gumbel: GumbelMode,
    /// Sample Gumbel noise during training (evaluation is always noise-free).
    pub gumbel_noise: bool,
    pub candidate: Activation,
    pub epochs: usize,
    pub lr: f64,
    /// Adam step for adjacency logits and the shared offset.
    pub logit_lr: f64,
    pub batch: usize,
    /// Window stride; defaults to `horizon`.
    pub stride: Option<usize>,
    /// Learn a shared offset added to every timestamp's logits.
    pub learn_offset: bool,
    /// Update the per-timestamp logits (the inner adjacencies).
    pub learn_snapshots: bool,
    /// Validation MAE above `divergence_factor * best` (or non-finite) aborts training.
    pub divergence_factor: f64,
    /// Weight of the mean edge probability added to the training loss.
    pub edge_penalty: f64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            k: 2,
            lag: 24,
            horizon: 24,
            hidden: 64,
            xi: 0.5,
            gumbel: GumbelMode::Binary,
            gumbel_noise: true,
            candidate: Activation::Tanh,
            epochs: 20,
            lr: 1e-3,
            logit_lr: 1e-2,
            batch: 16,
            stride: None,
            learn_offset: true,
            learn_snapshots: true,
            divergence_factor: 1e3,
            edge_penalty: 0.0,
        }
    }
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lag == 0 || self.hidden == 0 || !(self.xi > 0.0) || self.batch == 0 {
            return Err(Error::Config("outer needs lag >= 1, hidden >= 1, xi > 0, batch >= 1".into()));
        }
        Ok(())
    }
}

/// Block `2k + d` of a gate matrix holds `theta_{k,d}` (`d = 0` forward, `1` backward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateCell {
    pub ru_w: ParamId,
    pub ru_b: ParamId,
    pub c_w: ParamId,
    pub c_b: ParamId,
    pub input: usize,
    pub hidden: usize,
    pub k: usize,
}

impl GateCell {
    fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, k: usize, rng: &mut impl Rng) -> Self {
        let rows = 2 * (k + 1) * (input + hidden);
        let ru_w = store.add(format!("{prefix}.ru.w"), glorot(rows, 2 * hidden, rng));
        let ru_b = store.add(format!("{prefix}.ru.b"), Tensor2::filled(1, 2 * hidden, 1.0));
        let c_w = store.add(format!("{prefix}.c.w"), glorot(rows, hidden, rng));
        let c_b = store.add(format!("{prefix}.c.b"), Tensor2::zeros(1, hidden));
        Self { ru_w, ru_b, c_w, c_b, input, hidden, k }
    }

    fn bind(store: &ParamStore, prefix: &str, k: usize) -> Option<Self> {
        let ru_w = store.find(&format!("{prefix}.ru.w"))?;
        let ru_b = store.find(&format!("{prefix}.ru.b"))?;
        let c_w = store.find(&format!("{prefix}.c.w"))?;
        let c_b = store.find(&format!("{prefix}.c.b"))?;
        let hidden = store.value(c_b).cols();
        let input = store.value(c_w).rows() / (2 * (k + 1)) - hidden;
        Some(Self { ru_w, ru_b, c_w, c_b, input, hidden, k })
    }

    pub fn width(&self) -> usize {
        self.input + self.hidden
    }
}

/// Forward and backward random-walk transitions of an adjacency.
#[derive(Debug, Clone, Copy)]
pub struct Transitions {
    pub fwd: Var,
    pub bwd: Var,
}

pub fn record_transitions(g: &mut Graph, adj: Var) -> Transitions {
    let fwd = g.row_normalize(adj);
    let t = g.transpose(adj);
    let bwd = g.row_normalize(t);
    Transitions { fwd, bwd }
}

/// `[x, x, T_f x, T_b x, ..., T_f^K x, T_b^K x]`, so one matmul with a gate
/// matrix applies the whole diffusion polynomial.
pub fn record_diffusion(g: &mut Graph, tr: Transitions, x: Var, k: usize) -> Var {
    let mut out = g.concat_cols(x, x);
    let (mut yf, mut yb) = (x, x);
    for _ in 0..k {
        yf = g.node_mix(tr.fwd, yf);
        yb = g.node_mix(tr.bwd, yb);
        out = g.concat_cols(out, yf);
        out = g.concat_cols(out, yb);
    }
    out
}

/// Tape-free diffusion operator applied to `x` with explicit per-order
/// weights: `sum_k theta[k].0 * T_f^k x + theta[k].1 * T_b^k x`.
pub fn diffusion_weights(a: &Tensor2, theta: &[(Tensor2, Tensor2)], x: &Tensor2) -> Tensor2 {
    let tf = row_normalize(a);
    let tb = row_normalize(&a.transpose());
    let (mut yf, mut yb) = (x.clone(), x.clone());
    let mut out = Tensor2::zeros(x.rows(), theta.first().map_or(x.cols(), |t| t.0.cols()));
    for (k, (t1, t2)) in theta.iter().enumerate() {
        if k > 0 {
            yf = tf.matmul_canonical(&yf);
            yb = tb.matmul_canonical(&yb);
        }
        out.add_assign(&yf.matmul(t1));
        out.add_assign(&yb.matmul(t2));
    }
    out
}

#[derive(Debug, Clone)]
pub struct GrangerModel {
    pub store: ParamStore,
    pub encoder: GateCell,
    pub decoder: GateCell,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub h_dim: usize,
    pub hidden: usize,
    pub k: usize,
    pub lag: usize,
    pub candidate: Activation,
}

impl GrangerModel {
    pub fn new(h_dim: usize, cfg: &OuterConfig, seed: u64) -> Self {
        let mut rng = rng_for(&[seed, 0x6a7e]);
        let mut store = ParamStore::new();
        let encoder = GateCell::new(&mut store, "enc", h_dim, cfg.hidden, cfg.k, &mut rng);
        let decoder = GateCell::new(&mut store, "dec", h_dim, cfg.hidden, cfg.k, &mut rng);
        let out_w = store.add("out.w", glorot(cfg.hidden, h_dim, &mut rng));
        let out_b = store.add("out.b", Tensor2::zeros(1, h_dim));
        Self { store, encoder, decoder, out_w, out_b, h_dim, hidden: cfg.hidden, k: cfg.k, lag: cfg.lag, candidate: cfg.candidate }
    }

    /// Rebuilds a model around a restored store.
    pub fn from_store(store: ParamStore, k: usize, lag: usize, candidate: Activation) -> Result<Self> {
        let missing = || Error::Contract("checkpoint lacks Granger model parameters".into());
        let encoder = GateCell::bind(&store, "enc", k).ok_or_else(missing)?;
        let decoder = GateCell::bind(&store, "dec", k).ok_or_else(missing)?;
        let out_w = store.find("out.w").ok_or_else(missing)?;
        let out_b = store.find("out.b").ok_or_else(missing)?;
        let (hidden, h_dim) = store.value(out_w).shape();
        Ok(Self { store, encoder, decoder, out_w, out_b, h_dim, hidden, k, lag, candidate })
    }

    /// One recurrent step.
    pub fn record_cell(&self, g: &mut Graph, cell: &GateCell, tr: Transitions, h: Var, s: Var) -> Var {
        let hid = cell.hidden;
        let ru_w = g.param(&self.store, cell.ru_w);
        let ru_b = g.param(&self.store, cell.ru_b);
        let c_w = g.param(&self.store, cell.c_w);
        let c_b = g.param(&self.store, cell.c_b);

        let x = g.concat_cols(h, s);
        let dx = record_diffusion(g, tr, x, cell.k);
        let ru = g.matmul(dx, ru_w);
        let ru = g.add_row(ru, ru_b);
        let ru = g.sigmoid(ru);
        let r = g.slice_cols(ru, 0, hid);
        let u = g.slice_cols(ru, hid, 2 * hid);

        let rs = g.mul(r, s);
        let x2 = g.concat_cols(h, rs);
        let dx2 = record_diffusion(g, tr, x2, cell.k);
        let c = g.matmul(dx2, c_w);
        let c = g.add_row(c, c_b);
        let c = self.candidate.record(g, c);

        let keep = g.mul(u, s);
        let one_minus_u = g.one_minus(u);
        let fresh = g.mul(one_minus_u, c);
        g.add(keep, fresh)
    }

    fn project(&self, g: &mut Graph, s: Var) -> Var {
        let w = g.param(&self.store, self.out_w);
        let b = g.param(&self.store, self.out_b);
        let y = g.matmul(s, w);
        g.add_row(y, b)
    }

    /// Records a `horizon`-step forecast from `lag` (adjacency, input) pairs,
    /// oldest first. Adjacencies are edge weights in `[0, 1]`.
    pub fn record_forecast(&self, g: &mut Graph, adj: &[Var], inputs: &[Var], horizon: usize) -> Result<Vec<Var>> {
        if adj.len() != self.lag || inputs.len() != self.lag {
            return Err(Error::Contract(format!(
                "forecast needs exactly L = {} input steps, got {} adjacencies and {} inputs",
                self.lag,
                adj.len(),
                inputs.len()
            )));
        }
        if horizon == 0 {
            return Ok(Vec::new());
        }
        let n = g.value(inputs[0]).rows();
        let mut s = g.constant(Tensor2::zeros(n, self.hidden));
        let mut last_tr = None;
        for (a, h) in adj.iter().zip(inputs) {
            let tr = record_transitions(g, *a);
            s = self.record_cell(g, &self.encoder, tr, *h, s);
            last_tr = Some(tr);
        }
        let tr = last_tr.expect("lag >= 1");
        let mut prev = *inputs.last().expect("lag >= 1");
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            s = self.record_cell(g, &self.decoder, tr, prev, s);
            let y = self.project(g, s);
            out.push(y);
            prev = y;
        }
        Ok(out)
    }

    /// Tape-free forecast.
    pub fn forecast(&self, adj: &[Tensor2], inputs: &[Tensor2], horizon: usize) -> Result<Vec<Tensor2>> {
        let mut g = Graph::new();
        let av: Vec<Var> = adj.iter().map(|a| g.constant(a.clone())).collect();
        let hv: Vec<Var> = inputs.iter().map(|h| g.constant(h.clone())).collect();
        let out = self.record_forecast(&mut g, &av, &hv, horizon)?;
        Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Row-norm Granger scores: `score[(j, i)]` is the summed Frobenius norm,
    /// over gates and both cells, of the block of the effective gate operator
    /// mapping node `j`'s input to node `i`, with transitions averaged over
    /// the given adjacencies.
    pub fn granger_scores(&self, adjacencies: &[Tensor2]) -> Tensor2 {
        let n = adjacencies.first().map_or(0, |a| a.rows());
        let blocks = 2 * (self.k + 1);
        // c[b][(i, j)]: coefficient of block b from node j into node i
        let mut coef = vec![Tensor2::zeros(n, n); blocks];
        for a in adjacencies {
            let tf = row_normalize(a);
            let tb = row_normalize(&a.transpose());
            let (mut pf, mut pb) = (Tensor2::identity(n), Tensor2::identity(n));
            for k in 0..=self.k {
                if k > 0 {
                    pf = tf.matmul_canonical(&pf);
                    pb = tb.matmul_canonical(&pb);
                }
                coef[2 * k].add_assign(&pf);
                coef[2 * k + 1].add_assign(&pb);
            }
        }
        let scale = 1.0 / adjacencies.len().max(1) as f64;
        for c in &mut coef {
            *c = c.scale(scale);
        }

        let mut score = Tensor2::zeros(n, n);
        for cell in [&self.encoder, &self.decoder] {
            let f = cell.width();
            let hid = cell.hidden;
            let ru = self.store.value(cell.ru_w);
            let cw = self.store.value(cell.c_w);
            let gates: [(&Tensor2, usize, usize); 3] = [(ru, 0, hid), (ru, hid, 2 * hid), (cw, 0, hid)];
            for (w, c0, c1) in gates {
                let gram = Tensor2::from_fn(blocks, blocks, |b1, b2| {
                    let mut acc = 0.0;
                    for r in 0..f {
                        let x = &w.row(b1 * f + r)[c0..c1];
                        let y = &w.row(b2 * f + r)[c0..c1];
                        acc += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
                    }
                    acc
                });
                for j in 0..n {
                    for i in 0..n {
                        let cv: Vec<f64> = (0..blocks).map(|b| coef[b][(i, j)]).collect();
                        let mut q = 0.0;
                        for b1 in 0..blocks {
                            for b2 in 0..blocks {
                                q += cv[b1] * cv[b2] * gram[(b1, b2)];
                            }
                        }
                        score[(j, i)] += q.max(0.0).sqrt();
                    }
                }
            }
        }
        score
    }
}

/// Cause `j -> i` iff its score reaches `tolerance`.
pub fn extract_granger_causes(scores: &Tensor2, tolerance: f64) -> Vec<Vec<u8>> {
    (0..scores.rows())
        .map(|j| (0..scores.cols()).map(|i| u8::from(scores[(j, i)] >= tolerance && tolerance.is_finite())).collect())
        .collect()
}

fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Independent Gumbel(0, 1) draws for the edge and no-edge channels.
pub fn gumbel_noise(n: usize, seed: u64) -> (Tensor2, Tensor2) {
    let mut rng = rng_for(&[seed, 0x9b]);
    let g1 = Tensor2::from_fn(n, n, |_, _| gumbel(&mut rng));
    let g2 = Tensor2::from_fn(n, n, |_, _| gumbel(&mut rng));
    (g1, g2)
}

/// Records the relaxed adjacency for logits `l`; `noise` perturbs the edge
/// and no-edge channels. The diagonal is always zero.
pub fn record_refine(g: &mut Graph, logits: Var, xi: f64, noise: Option<&(Tensor2, Tensor2)>, mode: GumbelMode) -> Var {
    let n = g.value(logits).rows();
    let mask = g.constant(Tensor2::from_fn(n, n, |r, c| if r == c { 0.0 } else { 1.0 }));
    match mode {
        GumbelMode::Binary => {
            let mut x = logits;
            if let Some((g1, g2)) = noise {
                let d = g.constant(g1.sub(g2));
                x = g.add(x, d);
            }
            let x = g.scale(x, 1.0 / xi);
            let p = g.sigmoid(x);
            g.mul(p, mask)
        }
        GumbelMode::Row => {
            let mut x = logits;
            if let Some((g1, _)) = noise {
                let d = g.constant(g1.clone());
                x = g.add(x, d);
            }
            let x = g.scale(x, 1.0 / xi);
            let v = g.value(x);
            let shift = Tensor2::from_fn(n, n, |r, _| {
                -(0..n).filter(|&c| c != r).map(|c| v[(r, c)]).fold(f64::NEG_INFINITY, f64::max).max(-1e300)
            });
            let shift = g.constant(shift);
            let x = g.add(x, shift);
            let e = g.exp(x);
            let e = g.mul(e, mask);
            g.row_normalize(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedAdjacency {
    pub a_outer: Tensor2,
    /// Timestamp of the inner snapshot the logits came from.
    pub source_t: Option<usize>,
    pub gumbel_seed: Option<u64>,
}

/// Relaxed edge probabilities of `a_inner`; `seed = None` evaluates without noise.
pub fn refine_adjacency(a_inner: &Tensor2, xi: f64, seed: Option<u64>, mode: GumbelMode) -> RefinedAdjacency {
    let mut g = Graph::new();
    let l = g.constant(a_inner.clone());
    let noise = seed.map(|s| gumbel_noise(a_inner.rows(), s));
    let p = record_refine(&mut g, l, xi, noise.as_ref(), mode);
    RefinedAdjacency { a_outer: g.value(p).clone(), source_t: None, gumbel_seed: seed }
}

/// Where the forecaster's adjacencies come from.
#[derive(Debug, Clone)]
pub enum AdjacencySource {
    /// Learnable per-timestamp logits plus an optional shared offset.
    Learned {
        store: ParamStore,
        logits: BTreeMap<usize, ParamId>,
        offset: Option<ParamId>,
        xi: f64,
        mode: GumbelMode,
    },
    /// One fixed weighted graph for every timestamp.
    Static(Tensor2),
}

impl AdjacencySource {
    pub fn learned(n: usize, snapshots: impl IntoIterator<Item = (usize, Tensor2)>, learn_offset: bool, xi: f64, mode: GumbelMode) -> Self {
        let mut store = ParamStore::new();
        let offset = learn_offset.then(|| store.add("offset", Tensor2::zeros(n, n)));
        let logits = snapshots.into_iter().map(|(t, a)| (t, store.add(format!("a.{t}"), a))).collect();
        Self::Learned { store, logits, offset, xi, mode }
    }

    /// Random unit-weight graph with `degree` out-edges per node, fixed for all timestamps.
    pub fn random_static(n: usize, degree: usize, seed: u64) -> Self {
        let mut rng = rng_for(&[seed, 0x57a7]);
        let mut a = Tensor2::zeros(n, n);
        for j in 0..n {
            let mut others: Vec<usize> = (0..n).filter(|&i| i != j).collect();
            others.shuffle(&mut rng);
            for &i in others.iter().take(degree.min(n.saturating_sub(1))) {
                a[(j, i)] = 1.0;
            }
        }
        Self::Static(a)
    }

    /// Adds (or overwrites) logits for timestamps, e.g. test-time inner snapshots.
    pub fn insert(&mut self, t: usize, a: Tensor2) {
        if let Self::Learned { store, logits, .. } = self {
            match logits.get(&t) {
                Some(&id) => store.set_value(id, a),
                None => {
                    let id = store.add(format!("a.{t}"), a);
                    logits.insert(t, id);
                }
            }
        }
    }

    /// Per-timestamp logits (without the offset).
    pub fn snapshot_logits(&self, t: usize) -> Option<&Tensor2> {
        match self {
            Self::Learned { store, logits, .. } => logits.get(&t).map(|&id| store.value(id)),
            Self::Static(_) => None,
        }
    }

    pub fn offset(&self) -> Option<&Tensor2> {
        match self {
            Self::Learned { store, offset, .. } => offset.map(|id| store.value(id)),
            Self::Static(_) => None,
        }
    }

    pub fn timestamps(&self) -> Vec<usize> {
        match self {
            Self::Learned { logits, .. } => logits.keys().copied().collect(),
            Self::Static(_) => Vec::new(),
        }
    }

    pub fn store(&self) -> Option<&ParamStore> {
        match self {
            Self::Learned { store, .. } => Some(store),
            Self::Static(_) => None,
        }
    }

    /// Records the adjacency used at timestamp `t`.
    pub fn record(&self, g: &mut Graph, t: usize, noise_seed: Option<u64>) -> Result<Var> {
        match self {
            Self::Static(a) => Ok(g.constant(a.clone())),
            Self::Learned { store, logits, offset, xi, mode } => {
                let id = logits.get(&t).ok_or_else(|| Error::Contract(format!("no adjacency logits for timestamp {t}")))?;
                let mut l = g.param(store, *id);
                if let Some(o) = offset {
                    let ov = g.param(store, *o);
                    l = g.add(l, ov);
                }
                let noise = noise_seed.map(|s| gumbel_noise(g.value(l).rows(), s));
                Ok(record_refine(g, l, *xi, noise.as_ref(), *mode))
            }
        }
    }

    /// Noise-free adjacency at `t`.
    pub fn evaluate(&self, t: usize) -> Result<Tensor2> {
        let mut g = Graph::new();
        let v = self.record(&mut g, t, None)?;
        Ok(g.value(v).clone())
    }

    fn step(&mut self, grads: &[(ParamId, Tensor2)], adam: &AdamConfig, learn_snapshots: bool) {
        if let Self::Learned { store, offset, .. } = self {
            store.zero_grad();
            for (id, gr) in grads {
                if learn_snapshots || Some(*id) == *offset {
                    store.accumulate(*id, gr);
                }
            }
            store.adam_step(adam);
            for id in store.ids().collect::<Vec<_>>() {
                store.value_mut(id).set_diagonal(0.0);
            }
        }
    }
}

/// Mean absolute error over every entry of every step.
pub fn record_mae(g: &mut Graph, pred: &[Var], target: &[Var]) -> Var {
    assert_eq!(pred.len(), target.len());
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(target) {
        let d = g.sub(*p, *t);
        let a = g.abs(d);
        count += g.value(a).data().len();
        let s = g.sum(a);
        total = Some(match total {
            Some(acc) => g.add(acc, s),
            None => s,
        });
    }
    match total {
        Some(t) => g.scale(t, 1.0 / count as f64),
        None => g.constant(Tensor2::scalar(0.0)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub diverged: bool,
    /// Timestamps whose logits threshold to a cyclic graph.
    pub cyclic: Vec<usize>,
}

fn frames(latent: &TensorSeries, w: SeriesWindow) -> Vec<Tensor2> {
    w.range().map(|t| latent.frame(t)).collect()
}

/// Loss and gradients of one window.
fn window_grads(
    model: &GrangerModel,
    source: &AdjacencySource,
    latent: &TensorSeries,
    (input, target): (SeriesWindow, SeriesWindow),
    noise: Option<u64>,
    edge_penalty: f64,
) -> Result<(f64, Vec<(ParamId, Tensor2)>, Vec<(ParamId, Tensor2)>)> {
    let mut g = Graph::new();
    let mut adj = Vec::with_capacity(input.length);
    for t in input.range() {
        adj.push(source.record(&mut g, t, noise.map(|s| mix(&[s, t as u64])))?);
    }
    let inputs: Vec<Var> = frames(latent, input).into_iter().map(|f| g.constant(f)).collect();
    let targets: Vec<Var> = frames(latent, target).into_iter().map(|f| g.constant(f)).collect();
    let pred = model.record_forecast(&mut g, &adj, &inputs, target.length)?;
    let mut loss = record_mae(&mut g, &pred, &targets);
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Diverged("non-finite forecast loss".into()));
    }
    if edge_penalty > 0.0 && source.store().is_some() {
        for a in &adj {
            let m = g.mean(*a);
            let m = g.scale(m, edge_penalty / adj.len() as f64);
            loss = g.add(loss, m);
        }
    }
    let grads = g.backward(loss);
    let model_grads = g.param_grads(&grads, &model.store);
    let adj_grads = source.store().map(|s| g.param_grads(&grads, s)).unwrap_or_default();
    Ok((value, model_grads, adj_grads))
}

/// Mean forecast MAE over windows, noise-free, evaluated in parallel.
pub fn evaluate_mae(model: &GrangerModel, source: &AdjacencySource, latent: &TensorSeries, windows: &[(SeriesWindow, SeriesWindow)]) -> Result<f64> {
    if windows.is_empty() {
        return Ok(f64::NAN);
    }
    let maes: Vec<Result<f64>> = windows
        .par_iter()
        .map(|&(input, target)| {
            let adj: Vec<Tensor2> = input.range().map(|t| source.evaluate(t)).collect::<Result<_>>()?;
            let pred = model.forecast(&adj, &frames(latent, input), target.length)?;
            let truth = frames(latent, target);
            let mut s = 0.0;
            let mut c = 0usize;
            for (p, t) in pred.iter().zip(&truth) {
                s += p.sub(t).map(f64::abs).sum();
                c += p.data().len();
            }
            Ok(s / c as f64)
        })
        .collect();
    let mut total = 0.0;
    for m in maes {
        total += m?;
    }
    Ok(total / windows.len() as f64)
}

/// Minimizes forecast MAE over the model and (for learned sources) the
/// adjacency logits. Keeps the best-validation state.
pub fn train_outer(
    model: &mut GrangerModel,
    source: &mut AdjacencySource,
    latent: &TensorSeries,
    train: &[(SeriesWindow, SeriesWindow)],
    validation: &[(SeriesWindow, SeriesWindow)],
    cfg: &OuterConfig,
    seed: u64,
    edge_threshold: f64,
) -> Result<OuterReport> {
    cfg.validate()?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let logit_adam = AdamConfig::with_lr(cfg.logit_lr);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, GrangerModel, AdjacencySource)> = None;
    let mut diverged = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(&[seed, 0x0e, epoch as u64]));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let results: Vec<Result<(f64, Vec<(ParamId, Tensor2)>, Vec<(ParamId, Tensor2)>)>> = batch
                .par_iter()
                .map(|&w| {
                    let noise = cfg.gumbel_noise.then(|| mix(&[seed, epoch as u64, w as u64]));
                    window_grads(model, source, latent, train[w], noise, cfg.edge_penalty)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut model_acc: BTreeMap<ParamId, Tensor2> = BTreeMap::new();
            let mut adj_acc: BTreeMap<ParamId, Tensor2> = BTreeMap::new();
            for r in results {
                let (loss, mg, ag) = match r {
                    Ok(v) => v,
                    Err(Error::Diverged(msg)) => {
                        diverged = true;
                        log::warn!("outer training diverged at epoch {epoch}: {msg}");
                        break;
                    }
                    Err(e) => return Err(e),
                };
                loss_sum += loss;
                for (id, gr) in mg {
                    model_acc.entry(id).and_modify(|a| a.axpy(1.0, &gr)).or_insert(gr);
                }
                for (id, gr) in ag {
                    adj_acc.entry(id).and_modify(|a| a.axpy(1.0, &gr)).or_insert(gr);
                }
            }
            if diverged {
                break;
            }
            model.store.zero_grad();
            for (id, gr) in &model_acc {
                model.store.accumulate(*id, &gr.scale(scale));
            }
            model.store.adam_step(&adam);
            let adj_grads: Vec<(ParamId, Tensor2)> = adj_acc.into_iter().map(|(id, g)| (id, g.scale(scale))).collect();
            source.step(&adj_grads, &logit_adam, cfg.learn_snapshots);
        }
        if diverged {
            break;
        }
        let train_mae = loss_sum / train.len().max(1) as f64;
        let val_mae = if validation.is_empty() { None } else { Some(evaluate_mae(model, source, latent, validation)?) };
        log::debug!("outer epoch {epoch}: train MAE {train_mae:.5}, val MAE {val_mae:?}");
        epochs.push(EpochRecord { epoch, train_mae, val_mae });
        let score = val_mae.unwrap_or(train_mae);
        if !score.is_finite() || best.as_ref().is_some_and(|b| score > cfg.divergence_factor * b.0) {
            diverged = true;
            log::warn!("outer training diverged at epoch {epoch} (score {score})");
            break;
        }
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, epoch, model.clone(), source.clone()));
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, m, s)) = best {
        *model = m;
        *source = s;
    }
    let cyclic = source
        .timestamps()
        .into_iter()
        .filter(|&t| source.snapshot_logits(t).is_some_and(|a| !is_acyclic(a, edge_threshold)))
        .collect();
    Ok(OuterReport { epochs, best_epoch, diverged, cyclic })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_zero_is_scalar_sum() {
        let a = Tensor2::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]);
        let x = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let theta = vec![(Tensor2::identity(2).scale(0.5), Tensor2::identity(2).scale(1.5))];
        assert_eq!(diffusion_weights(&a, &theta, &x), x.scale(2.0));
    }

    #[test]
    fn empty_graph_keeps_only_order_zero() {
        let x = Tensor2::from_rows(&[vec![1.0], vec![-2.0], vec![0.5]]);
        let t = |s: f64| Tensor2::scalar(s);
        let theta = vec![(t(1.0), t(0.0)), (t(5.0), t(7.0)), (t(3.0), t(2.0))];
        assert_eq!(diffusion_weights(&Tensor2::zeros(3, 3), &theta, &x), x);
    }

    #[test]
    fn hard_limit_and_mean_half() {
        let a = Tensor2::from_rows(&[vec![0.0, 2.0, -1.0], vec![0.0, 0.0, 0.0], vec![0.3, 0.0, 0.0]]);
        let r = refine_adjacency(&a, 1e-4, None, GumbelMode::Binary);
        assert_eq!(r.a_outer[(0, 1)], 1.0);
        assert!(r.a_outer[(0, 2)] <= 0.5);
        assert_eq!(r.a_outer[(1, 2)], 0.5);
        assert_eq!(r.a_outer[(0, 0)], 0.0);
        let x = refine_adjacency(&a, 0.5, Some(3), GumbelMode::Binary);
        let y = refine_adjacency(&a, 0.5, Some(3), GumbelMode::Binary);
        assert_eq!(x, y);
    }

    #[test]
    fn row_mode_rows_sum_to_one() {
        let a = Tensor2::from_fn(4, 4, |r, c| (r as f64 - c as f64) * 0.3);
        let r = refine_adjacency(&a, 0.5, Some(1), GumbelMode::Row);
        for i in 0..4 {
            assert!((r.a_outer.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(r.a_outer[(i, i)], 0.0);
        }
    }

    #[test]
    fn wrong_lag_and_zero_horizon() {
        let cfg = OuterConfig { lag: 2, hidden: 3, k: 1, ..Default::default() };
        let m = GrangerModel::new(1, &cfg, 0);
        let a = Tensor2::zeros(2, 2);
        let h = Tensor2::zeros(2, 1);
        assert!(matches!(m.forecast(&[a.clone()], &[h.clone()], 1), Err(Error::Contract(_))));
        assert!(m.forecast(&[a.clone(), a], &[h.clone(), h], 0).unwrap().is_empty());
    }

    #[test]
    fn infinite_tolerance_is_empty() {
        let s = Tensor2::filled(3, 3, 1e300);
        assert!(extract_granger_causes(&s, f64::INFINITY).iter().flatten().all(|&v| v == 0));
    }

    use crate::diffkit::gradcheck::{check, check_store};

    fn rand_t(r: usize, c: usize, seed: u64) -> Tensor2 {
        let mut rng = rng_for(&[seed]);
        Tensor2::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forecast_loss_gradient_wrt_logits() {
        let cfg = OuterConfig { lag: 2, hidden: 2, k: 2, ..Default::default() };
        let m = GrangerModel::new(2, &cfg, 4);
        let noise = gumbel_noise(3, 9);
        let h: Vec<Tensor2> = (0..4).map(|s| rand_t(3, 2, 20 + s)).collect();
        let r = check(&[rand_t(3, 3, 1), rand_t(3, 3, 2)], 1e-5, |g, v| {
            let a: Vec<Var> = v.iter().map(|l| record_refine(g, *l, 0.5, Some(&noise), GumbelMode::Binary)).collect();
            let x: Vec<Var> = h[..2].iter().map(|t| g.constant(t.clone())).collect();
            let y: Vec<Var> = h[2..].iter().map(|t| g.constant(t.clone())).collect();
            let p = m.record_forecast(g, &a, &x, 2).unwrap();
            let d = g.sub(p[0], y[0]);
            let d2 = g.sub(p[1], y[1]);
            let s = g.square(d);
            let s2 = g.square(d2);
            let a = g.sum(s);
            let b = g.sum(s2);
            g.add(a, b)
        });
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn forecast_loss_gradient_wrt_model() {
        let cfg = OuterConfig { lag: 2, hidden: 2, k: 1, ..Default::default() };
        let m = GrangerModel::new(1, &cfg, 5);
        let a = [rand_t(3, 3, 3).map(f64::abs), rand_t(3, 3, 4).map(f64::abs)];
        let h: Vec<Tensor2> = (0..3).map(|s| rand_t(3, 1, 30 + s)).collect();
        let r = check_store(&m.store, 1e-5, |g, store| {
            let mm = GrangerModel { store: store.clone(), ..m.clone() };
            let av: Vec<Var> = a.iter().map(|t| g.constant(t.clone())).collect();
            let x: Vec<Var> = h[..2].iter().map(|t| g.constant(t.clone())).collect();
            let y = g.constant(h[2].clone());
            let p = mm.record_forecast(g, &av, &x, 1).unwrap();
            let d = g.sub(p[0], y);
            let s = g.square(d);
            g.sum(s)
        });
        assert!(r.passes(1e-4), "{r:?}");
    }
}
