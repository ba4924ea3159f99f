//! Per-timestamp instantaneous structure learning.
//!
//! Each timestamp `t` owns a weighted adjacency `A_t`. A variational structural
//! model shared across timestamps encodes `Z = (I - A^T) f_enc(H)` and decodes
//! `H = f_dec((I - A^T)^{-1} Z)`; the acyclicity residual
//! `alpha(A) = Tr[(I + A o A)^N] - N` is driven to zero by an augmented
//! Lagrangian.
//!
//! Per-timestamp data are `N x (B * h_dim)` matrices: `B` samples side by side,
//! each an `N x h_dim` block. The pipeline uses `B = 1`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffkit::{Activation, AdamConfig, Graph, Mlp2, ParamId, ParamStore, Tensor2, Var};
use crate::error::{Error, Result};
use crate::graph::{project_acyclic, EdgeRemoval};
use crate::rng::rng_for;
use crate::tensor::{AxisMeta, TensorSeries};

#[derive(Debug, Clone, PartialEq)]
pub struct Acyclicity {
    pub value: f64,
    /// `N * [(I + A o A)^(N-1)]^T o 2A`.
    pub grad: Tensor2,
    /// Entries of `A o A` that hit the clamp.
    pub clamped: usize,
}

/// `Tr[(I + A o A)^N] - N` without clamping.
pub fn acyclicity(a: &Tensor2) -> f64 {
    acyclicity_with_grad(a, f64::INFINITY).value
}

/// Residual and gradient, with entries of `A o A` clamped at `clamp` before
/// powering. The gradient keeps the unclamped `2A` factor so large entries
/// still feel the penalty.
pub fn acyclicity_with_grad(a: &Tensor2, clamp: f64) -> Acyclicity {
    let n = a.rows();
    assert_eq!(n, a.cols(), "acyclicity needs a square matrix");
    if n == 0 {
        return Acyclicity { value: 0.0, grad: Tensor2::zeros(0, 0), clamped: 0 };
    }
    let sq = a.map(|v| (v * v).min(clamp));
    let clamped = a.data().iter().filter(|v| *v * *v > clamp).count();
    if clamped > 0 {
        log::debug!("acyclicity: {clamped} entries of A o A clamped at {clamp}");
    }
    let m = Tensor2::identity(n).add(&sq);
    let p = m.powi(n as u32 - 1);
    let value = p.matmul(&m).trace() - n as f64;
    let grad = p.transpose().hadamard(a).scale(2.0 * n as f64);
    Acyclicity { value, grad, clamped }
}

/// Records the residual of `a` on the tape.
pub fn record_acyclicity(g: &mut Graph, a: Var, clamp: f64) -> Var {
    let ac = acyclicity_with_grad(g.value(a), clamp);
    g.scalar_with_grad(a, ac.value, ac.grad)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct InnerConfig {
    /// Hidden width of `f_enc` / `f_dec`.
    pub hidden: usize,
    pub activation: Activation,
    /// Deterministic encoder (`Z = mean`, unit variance, no sampling).
    pub unit_variance: bool,
    /// Separate encoder/decoder per timestamp instead of one shared model.
    pub per_t_vae: bool,
    pub lambda0: f64,
    pub c0: f64,
    pub eta: f64,
    pub gamma: f64,
    pub atol: f64,
    /// Dual-round cap.
    pub max_rounds: usize,
    pub steps_per_round: usize,
    /// Adam step for the adjacencies. Each round a timestamp uses
    /// `min(lr, lr_residual_scale * residual^(1/4))`, so the step shrinks with
    /// the entries that still close cycles.
    pub lr: f64,
    pub lr_residual_scale: f64,
    /// Adam step for the encoder/decoder.
    pub vae_lr: f64,
    pub clamp: f64,
    pub c_max: f64,
    /// Entries below this magnitude are dropped by the output projection.
    pub edge_threshold: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            activation: Activation::Tanh,
            unit_variance: false,
            per_t_vae: false,
            lambda0: 0.0,
            c0: 1.0,
            eta: 10.0,
            gamma: 0.25,
            atol: 1e-8,
            max_rounds: 30,
            steps_per_round: 100,
            lr: 1e-2,
            lr_residual_scale: 0.003,
            vae_lr: 1e-2,
            clamp: 10.0,
            c_max: 1e20,
            edge_threshold: 0.3,
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 1.0) || !(self.gamma > 0.0 && self.gamma < 1.0) || self.c0 <= 0.0 {
            return Err(Error::Config("inner schedule needs eta > 1, 0 < gamma < 1, c0 > 0".into()));
        }
        if self.max_rounds == 0 || self.steps_per_round == 0 || self.hidden == 0 {
            return Err(Error::Config("inner max_rounds, steps_per_round and hidden must be >= 1".into()));
        }
        Ok(())
    }
}

/// Variational SEM encoder/decoder pair.
#[derive(Debug, Clone)]
pub struct InnerVae {
    pub store: ParamStore,
    pub enc: Mlp2,
    pub dec: Mlp2,
    /// Linear log-variance head on the `f_enc` output; absent in unit-variance mode.
    pub logvar: Option<(ParamId, ParamId)>,
    pub h_dim: usize,
}

impl InnerVae {
    pub fn new(h_dim: usize, hidden: usize, activation: Activation, unit_variance: bool, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let enc = Mlp2::new(&mut store, "enc", (h_dim, hidden, h_dim), activation, rng);
        let dec = Mlp2::new(&mut store, "dec", (h_dim, hidden, h_dim), activation, rng);
        let logvar = (!unit_variance).then(|| {
            let w = store.add("logvar.w", Tensor2::zeros(h_dim, h_dim));
            let b = store.add("logvar.b", Tensor2::zeros(1, h_dim));
            (w, b)
        });
        Self { store, enc, dec, logvar, h_dim }
    }

    /// Linear identity encoder and decoder; the log-variance head (if any) starts at zero.
    pub fn identity(h_dim: usize, unit_variance: bool) -> Self {
        let mut store = ParamStore::new();
        let enc = Mlp2::identity(&mut store, "enc", h_dim, Activation::Linear);
        let dec = Mlp2::identity(&mut store, "dec", h_dim, Activation::Linear);
        let logvar = (!unit_variance).then(|| {
            let w = store.add("logvar.w", Tensor2::zeros(h_dim, h_dim));
            let b = store.add("logvar.b", Tensor2::zeros(1, h_dim));
            (w, b)
        });
        Self { store, enc, dec, logvar, h_dim }
    }

    fn rowwise(&self, g: &mut Graph, mlp: &Mlp2, x: Var) -> Var {
        let (n, w) = g.value(x).shape();
        let flat = g.reshape(x, n * w / self.h_dim, self.h_dim);
        let y = mlp.forward(g, &self.store, flat);
        g.reshape(y, n, w)
    }

    fn one_minus_at(g: &mut Graph, a: Var) -> Var {
        let n = g.value(a).rows();
        let eye = g.constant(Tensor2::identity(n));
        let at = g.transpose(a);
        g.sub(eye, at)
    }

    /// `(Z_mean, Z_logvar)`; the log-variance is `None` in unit-variance mode.
    pub fn encode(&self, g: &mut Graph, a: Var, h: Var) -> (Var, Option<Var>) {
        let (n, w) = g.value(h).shape();
        assert_eq!(g.value(a).shape(), (n, n), "A must be N x N");
        assert_eq!(w % self.h_dim, 0, "data width must be a multiple of h_dim");
        let flat = g.reshape(h, n * w / self.h_dim, self.h_dim);
        let feats = self.enc.forward(g, &self.store, flat);
        let feats_wide = g.reshape(feats, n, w);
        let m = Self::one_minus_at(g, a);
        let mean = g.matmul(m, feats_wide);
        let logvar = self.logvar.map(|(wid, bid)| {
            let wv = g.param(&self.store, wid);
            let bv = g.param(&self.store, bid);
            let lv = g.matmul(feats, wv);
            let lv = g.add_row(lv, bv);
            g.reshape(lv, n, w)
        });
        (mean, logvar)
    }

    /// `Z = mean + exp(logvar / 2) o eps`; just `mean` when `eps` is `None` or in unit-variance mode.
    pub fn sample(&self, g: &mut Graph, mean: Var, logvar: Option<Var>, eps: Option<&Tensor2>) -> Var {
        match (logvar, eps) {
            (Some(lv), Some(e)) => {
                let half = g.scale(lv, 0.5);
                let sd = g.exp(half);
                let e = g.constant(e.clone());
                let noise = g.mul(sd, e);
                g.add(mean, noise)
            }
            _ => mean,
        }
    }

    /// `f_dec((I - A^T)^{-1} Z)`.
    pub fn decode(&self, g: &mut Graph, a: Var, z: Var) -> Result<Var> {
        let m = Self::one_minus_at(g, a);
        let y = g.solve(m, z)?;
        Ok(self.rowwise(g, &self.dec, y))
    }

    /// Records the negative ELBO (KL + reconstruction), averaged over samples.
    pub fn elbo(&self, g: &mut Graph, a: Var, h: Var, eps: Option<&Tensor2>) -> Result<ElboParts> {
        let samples = (g.value(h).cols() / self.h_dim) as f64;
        let (mean, logvar) = self.encode(g, a, h);
        let z = self.sample(g, mean, logvar, eps);
        let h_hat = self.decode(g, a, z)?;

        let mu2 = g.square(mean);
        let kl_terms = match logvar {
            Some(lv) => {
                let e = g.exp(lv);
                let t = g.add(mu2, e);
                let t = g.sub(t, lv);
                g.shift(t, -1.0)
            }
            None => mu2,
        };
        let kl = g.sum(kl_terms);
        let kl = g.scale(kl, 0.5 / samples);
        let diff = g.sub(h, h_hat);
        let sq = g.square(diff);
        let recon = g.sum(sq);
        let recon = g.scale(recon, 0.5 / samples);
        let loss = g.add(kl, recon);
        Ok(ElboParts { loss, kl, recon })
    }

    /// Noise for one step; `None` in unit-variance mode.
    pub fn draw_noise(&self, rows: usize, cols: usize, rng: &mut impl Rng) -> Option<Tensor2> {
        self.logvar.map(|_| Tensor2::from_fn(rows, cols, |_, _| rng.sample(StandardNormal)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ElboParts {
    pub loss: Var,
    pub kl: Var,
    pub recon: Var,
}

/// Tape-free `(Z_mean, Z_logvar)` for one adjacency and data block.
pub fn encode_sem(vae: &InnerVae, a: &Tensor2, h: &Tensor2) -> (Tensor2, Option<Tensor2>) {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let hv = g.constant(h.clone());
    let (m, lv) = vae.encode(&mut g, av, hv);
    (g.value(m).clone(), lv.map(|v| g.value(v).clone()))
}

pub fn decode_sem(vae: &InnerVae, a: &Tensor2, z: &Tensor2) -> Result<Tensor2> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let zv = g.constant(z.clone());
    let out = vae.decode(&mut g, av, zv)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboValue {
    pub loss: f64,
    pub kl: f64,
    pub recon: f64,
}

pub fn elbo_loss(vae: &InnerVae, a: &Tensor2, h: &Tensor2, eps: Option<&Tensor2>) -> Result<ElboValue> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let hv = g.constant(h.clone());
    let p = vae.elbo(&mut g, av, hv, eps)?;
    let v = ElboValue { loss: g.scalar(p.loss), kl: g.scalar(p.kl), recon: g.scalar(p.recon) };
    if !v.loss.is_finite() {
        return Err(Error::Diverged("non-finite ELBO".into()));
    }
    Ok(v)
}

/// Learned adjacency at one timestamp with its dual state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagSnapshot {
    pub t: usize,
    pub a: Tensor2,
    pub acyclicity_residual: f64,
    pub lambda: f64,
    pub c: f64,
    /// `acyclicity_residual <= atol` at the end of optimization.
    pub converged: bool,
    pub rounds: usize,
    /// Residual after the previous dual round (for the `c` growth test).
    #[serde(default)]
    pub prev_residual: Option<f64>,
}

impl DagSnapshot {
    pub fn fresh(t: usize, n: usize, cfg: &InnerConfig) -> Self {
        Self {
            t,
            a: Tensor2::zeros(n, n),
            acyclicity_residual: 0.0,
            lambda: cfg.lambda0,
            c: cfg.c0,
            converged: false,
            rounds: 0,
            prev_residual: None,
        }
    }

    /// Thresholded, cycle-free binary-support version of `a`.
    pub fn project(&self, threshold: f64) -> (Tensor2, Vec<EdgeRemoval>) {
        project_acyclic(&self.a, threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mean_loss: f64,
    pub max_residual: f64,
    pub max_c: f64,
}

#[derive(Debug, Clone)]
pub struct InnerRun {
    pub snapshots: Vec<DagSnapshot>,
    pub history: Vec<RoundRecord>,
    /// Per-snapshot `(lambda, c)` after every dual round.
    pub dual_trace: Vec<Vec<(f64, f64)>>,
}

/// Shared or per-timestamp encoder/decoders plus the index map.
#[derive(Debug, Clone)]
pub struct InnerModel {
    pub vaes: Vec<InnerVae>,
    pub shared: bool,
}

impl InnerModel {
    pub fn new(h_dim: usize, timestamps: usize, cfg: &InnerConfig, seed: u64) -> Self {
        let count = if cfg.per_t_vae { timestamps.max(1) } else { 1 };
        let vaes = (0..count)
            .map(|k| {
                let mut rng = rng_for(&[seed, 0x1aae, k as u64]);
                InnerVae::new(h_dim, cfg.hidden, cfg.activation, cfg.unit_variance, &mut rng)
            })
            .collect();
        Self { vaes, shared: !cfg.per_t_vae }
    }

    pub fn from_vae(vae: InnerVae) -> Self {
        Self { vaes: vec![vae], shared: true }
    }

    pub fn vae_for(&self, index: usize) -> &InnerVae {
        if self.shared { &self.vaes[0] } else { &self.vaes[index] }
    }

    fn slot(&self, index: usize) -> usize {
        if self.shared { 0 } else { index }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct InnerOptions {
    pub seed: u64,
    /// Keep the encoder/decoder fixed and only learn adjacencies.
    pub freeze_vae: bool,
}

/// Jointly optimizes every `A_t` (and the shared encoder/decoder) on the
/// augmented Lagrangian `ELBO + lambda * alpha + c/2 * alpha^2`, one set of
/// dual variables per timestamp, until every residual is `<= atol` or the
/// round cap is hit. `start` warm-starts adjacencies and dual variables.
pub fn optimize_inner(
    model: &mut InnerModel,
    data: &[(usize, Tensor2)],
    start: Option<&[DagSnapshot]>,
    cfg: &InnerConfig,
    opts: InnerOptions,
) -> Result<InnerRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Ok(InnerRun { snapshots: Vec::new(), history: Vec::new(), dual_trace: Vec::new() });
    }
    let n = data[0].1.rows();
    if !model.shared && model.vaes.len() != data.len() {
        return Err(Error::Config(format!("{} per-timestamp models for {} timestamps", model.vaes.len(), data.len())));
    }
    let mut snaps: Vec<DagSnapshot> = match start {
        Some(s) if s.len() == data.len() => s.to_vec(),
        Some(s) => return Err(Error::Contract(format!("{} warm-start snapshots for {} timestamps", s.len(), data.len()))),
        None => data.iter().map(|(t, _)| DagSnapshot::fresh(*t, n, cfg)).collect(),
    };
    let mut a_stores: Vec<(ParamStore, ParamId)> = snaps
        .iter()
        .map(|s| {
            let mut st = ParamStore::new();
            let mut a = s.a.clone();
            a.set_diagonal(0.0);
            let id = st.add("a", a);
            (st, id)
        })
        .collect();

    let count = data.len() as f64;
    let vae_adam = AdamConfig::with_lr(cfg.vae_lr);
    let mut history = Vec::new();
    let mut dual_trace = vec![Vec::new(); data.len()];
    for round in 0..cfg.max_rounds {
        for (st, _) in &mut a_stores {
            st.reset_optimizer();
        }
        let a_lr: Vec<f64> = snaps
            .iter()
            .map(|s| s.prev_residual.map_or(cfg.lr, |r| cfg.lr.min(cfg.lr_residual_scale * r.max(0.0).powf(0.25))))
            .collect();
        let mut loss_sum = 0.0;
        for step in 0..cfg.steps_per_round {
            let results: Vec<Result<(f64, Vec<(ParamId, Tensor2)>, Tensor2)>> = (0..data.len())
                .into_par_iter()
                .map(|k| {
                    let (t, h) = &data[k];
                    let vae = model.vae_for(k);
                    let (a_store, a_id) = &a_stores[k];
                    let snap = &snaps[k];
                    let mut rng = rng_for(&[opts.seed, round as u64, step as u64, *t as u64]);
                    let eps = vae.draw_noise(h.rows(), h.cols(), &mut rng);
                    let mut g = Graph::new();
                    let av = g.param(a_store, *a_id);
                    let hv = g.constant(h.clone());
                    let parts = vae.elbo(&mut g, av, hv, eps.as_ref())?;
                    let alpha = record_acyclicity(&mut g, av, cfg.clamp);
                    let a2 = g.mul(alpha, alpha);
                    let pen = g.scale(alpha, snap.lambda);
                    let quad = g.scale(a2, 0.5 * snap.c);
                    let loss = g.add(parts.loss, pen);
                    let loss = g.add(loss, quad);
                    let value = g.scalar(loss);
                    if !value.is_finite() {
                        return Err(Error::Diverged(format!("non-finite inner loss at t = {t}")));
                    }
                    let grads = g.backward(loss);
                    let vae_grads = if opts.freeze_vae { Vec::new() } else { g.param_grads(&grads, &vae.store) };
                    let mut ga = grads.wrt(av).cloned().unwrap_or_else(|| Tensor2::zeros(n, n));
                    ga.set_diagonal(0.0);
                    Ok((value, vae_grads, ga))
                })
                .collect();

            let mut per_slot: Vec<Vec<(ParamId, Tensor2)>> = vec![Vec::new(); model.vaes.len()];
            let mut step_loss = 0.0;
            for (k, r) in results.into_iter().enumerate() {
                let (value, vae_grads, ga) = r?;
                step_loss += value;
                per_slot[model.slot(k)].extend(vae_grads);
                let (st, id) = &mut a_stores[k];
                st.zero_grad();
                st.accumulate(*id, &ga.scale(1.0 / count));
                st.adam_step(&AdamConfig::with_lr(a_lr[k]));
                st.value_mut(*id).set_diagonal(0.0);
            }
            loss_sum += step_loss / count;
            if !opts.freeze_vae {
                for (slot, grads) in per_slot.iter().enumerate() {
                    let store = &mut model.vaes[slot].store;
                    store.zero_grad();
                    for (id, gr) in grads {
                        store.accumulate(*id, &gr.scale(1.0 / count));
                    }
                    store.adam_step(&vae_adam);
                }
            }
        }

        let mut max_residual: f64 = 0.0;
        let mut max_c: f64 = 0.0;
        for (k, snap) in snaps.iter_mut().enumerate() {
            let a = a_stores[k].0.value(a_stores[k].1).clone();
            let alpha = acyclicity_with_grad(&a, cfg.clamp).value;
            snap.a = a;
            snap.acyclicity_residual = alpha;
            snap.rounds += 1;
            snap.lambda += snap.c * alpha;
            if let Some(prev) = snap.prev_residual {
                if alpha.abs() > cfg.gamma * prev.abs() {
                    snap.c = (snap.c * cfg.eta).min(cfg.c_max);
                }
            }
            snap.prev_residual = Some(alpha);
            snap.converged = alpha <= cfg.atol;
            dual_trace[k].push((snap.lambda, snap.c));
            max_residual = max_residual.max(alpha);
            max_c = max_c.max(snap.c);
        }
        let mean_loss = loss_sum / cfg.steps_per_round as f64;
        log::debug!("inner round {round}: loss {mean_loss:.6}, max alpha {max_residual:.3e}, max c {max_c:.1e}");
        history.push(RoundRecord { round, mean_loss, max_residual, max_c });
        if snaps.iter().all(|s| s.converged) {
            break;
        }
    }
    let open: Vec<&DagSnapshot> = snaps.iter().filter(|s| !s.converged).collect();
    if let Some(worst) = open.iter().max_by(|a, b| a.acyclicity_residual.total_cmp(&b.acyclicity_residual)) {
        log::warn!(
            "{} of {} snapshots above the acyclicity tolerance (worst t = {}, alpha = {:.3e})",
            open.len(),
            snaps.len(),
            worst.t,
            worst.acyclicity_residual
        );
    }
    Ok(InnerRun { snapshots: snaps, history, dual_trace })
}

/// Learns one adjacency from `B` samples stacked as an `N x (B * h_dim)` matrix.
pub fn fit_snapshot(data: &Tensor2, h_dim: usize, cfg: &InnerConfig, seed: u64) -> Result<(DagSnapshot, InnerModel)> {
    let mut model = InnerModel::new(h_dim, 1, cfg, seed);
    let run = optimize_inner(&mut model, &[(0, data.clone())], None, cfg, InnerOptions { seed, freeze_vae: false })?;
    Ok((run.snapshots.into_iter().next().expect("one snapshot"), model))
}

/// Per-timestamp data blocks `N x h_dim` from a latent series.
pub fn latent_blocks(h: &TensorSeries, timestamps: impl IntoIterator<Item = usize>) -> Vec<(usize, Tensor2)> {
    timestamps.into_iter().map(|t| (t, h.frame(t))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub t: usize,
    pub acyclicity_residual: f64,
    pub lambda: f64,
    pub c: f64,
    pub converged: bool,
    pub removed_edges: Vec<EdgeRemoval>,
}

/// JSON summary list plus an `N x N x T` adjacency file in the TTS layout
/// (location = source node, feature = target node).
pub fn export_snapshots(snaps: &[DagSnapshot], threshold: f64) -> Result<(Vec<SnapshotSummary>, Vec<u8>)> {
    let summaries = snaps
        .iter()
        .map(|s| SnapshotSummary {
            t: s.t,
            acyclicity_residual: s.acyclicity_residual,
            lambda: s.lambda,
            c: s.c,
            converged: s.converged,
            removed_edges: s.project(threshold).1,
        })
        .collect();
    let n = snaps.first().map_or(0, |s| s.a.rows());
    let t = snaps.len();
    let mut values = vec![0.0; n * n * t];
    for (k, s) in snaps.iter().enumerate() {
        for j in 0..n {
            for i in 0..n {
                values[(j * n + i) * t + k] = s.a[(j, i)];
            }
        }
    }
    let meta = AxisMeta {
        location_ids: (0..n).map(|j| format!("from{j}")).collect(),
        feature_names: (0..n).map(|i| format!("to{i}")).collect(),
        timestamps: snaps.iter().map(|s| s.t as i64).collect(),
    };
    let bytes = if t == 0 {
        Vec::new()
    } else {
        crate::tensor::write_tts(&TensorSeries::new(n, n, t, values, meta)?)
    };
    Ok((summaries, bytes))
}
