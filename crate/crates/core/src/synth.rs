//! Synthetic systems with known causal structure: Lorenz-96 and linear VAR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffkit::Tensor2;
use crate::error::{Error, Result};
use crate::tensor::TensorSeries;

/// Binary causal graph; `adjacency[(j, i)] == 1` iff `j` is a parent of `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthGraph {
    pub adjacency: Vec<Vec<u8>>,
    /// Whether self-edges `i -> i` are part of the truth.
    pub self_edges: bool,
}

impl GroundTruthGraph {
    pub fn size(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_edge(&self, from: usize, to: usize) -> bool {
        self.adjacency[from][to] == 1
    }

    pub fn to_tensor(&self) -> Tensor2 {
        let p = self.size();
        Tensor2::from_fn(p, p, |j, i| self.adjacency[j][i] as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.adjacency).expect("serializes")
    }

    /// Reads either a bare 0/1 matrix or the full object form.
    pub fn from_json(s: &str) -> Result<Self> {
        if let Ok(adjacency) = serde_json::from_str::<Vec<Vec<u8>>>(s) {
            let self_edges = adjacency.iter().enumerate().any(|(i, r)| r.get(i) == Some(&1));
            let g = Self { adjacency, self_edges };
            g.validate()?;
            return Ok(g);
        }
        let g: Self = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let p = self.size();
        if self.adjacency.iter().any(|r| r.len() != p || r.iter().any(|&v| v > 1)) {
            return Err(Error::Parse("ground truth must be a square 0/1 matrix".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lorenz96Config {
    /// Number of variables, at least 4.
    pub p: usize,
    /// Number of recorded timestamps.
    pub t: usize,
    /// Forcing constant.
    pub forcing: f64,
    /// RK4 integration step.
    pub dt: f64,
    /// Integration steps between consecutive recorded samples.
    pub substeps: usize,
    /// Integration steps discarded before recording starts.
    pub burn_in: usize,
    pub seed: u64,
    /// Std of Gaussian observation noise added after integration.
    pub noise_std: f64,
    /// Std of the Gaussian perturbation of the initial state around `forcing`.
    pub init_std: f64,
    /// Explicit initial state; overrides the random perturbation.
    pub initial_state: Option<Vec<f64>>,
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Self {
            p: 10,
            t: 500,
            forcing: 10.0,
            dt: 0.01,
            substeps: 1,
            burn_in: 0,
            seed: 0,
            noise_std: 0.0,
            init_std: 0.01,
            initial_state: None,
        }
    }
}

/// Lorenz-96 time derivative with wrap-around indexing.
pub fn lorenz96_rhs(x: &[f64], forcing: f64, out: &mut [f64]) {
    let p = x.len();
    for i in 0..p {
        let ip1 = x[(i + 1) % p];
        let im1 = x[(i + p - 1) % p];
        let im2 = x[(i + p - 2) % p];
        out[i] = (ip1 - im2) * im1 - x[i] + forcing;
    }
}

/// One classical fourth-order Runge-Kutta step, in place.
pub fn rk4_step(x: &mut [f64], forcing: f64, dt: f64) {
    let p = x.len();
    let mut k1 = vec![0.0; p];
    let mut k2 = vec![0.0; p];
    let mut k3 = vec![0.0; p];
    let mut k4 = vec![0.0; p];
    let mut tmp = vec![0.0; p];
    lorenz96_rhs(x, forcing, &mut k1);
    for i in 0..p {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    lorenz96_rhs(&tmp, forcing, &mut k2);
    for i in 0..p {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    lorenz96_rhs(&tmp, forcing, &mut k3);
    for i in 0..p {
        tmp[i] = x[i] + dt * k3[i];
    }
    lorenz96_rhs(&tmp, forcing, &mut k4);
    for i in 0..p {
        x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Parents of `i` are `i-2, i-1, i, i+1` (mod P).
pub fn lorenz96_truth(p: usize) -> GroundTruthGraph {
    let mut adjacency = vec![vec![0u8; p]; p];
    for i in 0..p {
        for off in [p - 2, p - 1, 0, 1] {
            adjacency[(i + off) % p][i] = 1;
        }
    }
    GroundTruthGraph { adjacency, self_edges: true }
}

/// Integrates Lorenz-96 and returns an `N = P, D = 1` series with its parent graph.
pub fn simulate_lorenz96(cfg: &Lorenz96Config) -> Result<(TensorSeries, GroundTruthGraph)> {
    if cfg.p < 4 {
        return Err(Error::Config(format!("Lorenz-96 needs p >= 4, got {}", cfg.p)));
    }
    if !(cfg.dt > 0.0) || cfg.t == 0 || cfg.substeps == 0 {
        return Err(Error::Config("Lorenz-96 needs dt > 0, t >= 1 and substeps >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x: Vec<f64> = match &cfg.initial_state {
        Some(init) if init.len() == cfg.p => init.clone(),
        Some(init) => return Err(Error::Config(format!("initial state has {} entries, p = {}", init.len(), cfg.p))),
        None => (0..cfg.p)
            .map(|_| cfg.forcing + cfg.init_std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    };
    let blew_up = |x: &[f64]| x.iter().any(|v| !v.is_finite() || v.abs() > 1e6);
    for step in 0..cfg.burn_in {
        rk4_step(&mut x, cfg.forcing, cfg.dt);
        if blew_up(&x) {
            return Err(Error::BlowUp(format!("|X| > 1e6 during burn-in step {step}; try a smaller dt than {}", cfg.dt)));
        }
    }
    let mut values = vec![0.0; cfg.p * cfg.t];
    for k in 0..cfg.t {
        if k > 0 {
            for _ in 0..cfg.substeps {
                rk4_step(&mut x, cfg.forcing, cfg.dt);
            }
            if blew_up(&x) {
                return Err(Error::BlowUp(format!("|X| > 1e6 at sample {k}; try a smaller dt than {}", cfg.dt)));
            }
        }
        for (i, &xi) in x.iter().enumerate() {
            values[i * cfg.t + k] = xi;
        }
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut values {
            *v += noise.sample(&mut rng);
        }
    }
    let ts = TensorSeries::with_default_meta(cfg.p, 1, cfg.t, values)?;
    Ok((ts, lorenz96_truth(cfg.p)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarConfig {
    /// Lag matrices `W^(1..=L)`, each `P x P`; row `i` holds the coefficients of `H_i^(t)`.
    pub coefficients: Vec<Tensor2>,
    pub t: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// The first `L` states (oldest first); drawn from N(0, 1) when absent.
    pub initial: Option<Vec<Vec<f64>>>,
    /// Steps simulated and discarded before the first recorded state.
    pub burn_in: usize,
    /// Reject coefficients whose companion spectral radius is >= 1.
    pub check_stability: bool,
}

impl VarConfig {
    pub fn new(coefficients: Vec<Tensor2>, t: usize, noise_std: f64, seed: u64) -> Self {
        Self { coefficients, t, noise_std, seed, initial: None, burn_in: 0, check_stability: true }
    }
}

/// Companion matrix of a VAR(L).
pub fn companion(coefficients: &[Tensor2]) -> Tensor2 {
    let lags = coefficients.len();
    let p = coefficients[0].rows();
    let n = p * lags;
    let mut c = Tensor2::zeros(n, n);
    for (l, w) in coefficients.iter().enumerate() {
        for i in 0..p {
            for j in 0..p {
                c[(i, l * p + j)] = w[(i, j)];
            }
        }
    }
    for r in p..n {
        c[(r, r - p)] = 1.0;
    }
    c
}

/// Spectral radius via Gelfand's formula `lim ||C^k||^(1/k)`, with `k = 2^60`
/// reached by normalized repeated squaring.
pub fn spectral_radius(c: &Tensor2) -> f64 {
    let norm = c.frobenius();
    if norm == 0.0 {
        return 0.0;
    }
    let mut m = c.scale(1.0 / norm);
    let mut log_scale = norm.ln();
    let mut power = 1.0f64;
    for _ in 0..60 {
        m = m.matmul(&m);
        power *= 2.0;
        let n = m.frobenius();
        if n == 0.0 {
            return 0.0;
        }
        log_scale = 2.0 * log_scale + n.ln();
        m = m.scale(1.0 / n);
    }
    (log_scale / power).exp()
}

/// Edge `j -> i` iff some lag has a nonzero `W^(l)[i][j]`.
pub fn var_truth(coefficients: &[Tensor2]) -> GroundTruthGraph {
    let p = coefficients[0].rows();
    let mut adjacency = vec![vec![0u8; p]; p];
    for w in coefficients {
        for i in 0..p {
            for j in 0..p {
                if w[(i, j)] != 0.0 {
                    adjacency[j][i] = 1;
                }
            }
        }
    }
    let self_edges = (0..p).any(|i| adjacency[i][i] == 1);
    GroundTruthGraph { adjacency, self_edges }
}

/// Simulates `H^(t) = sum_l W^(l) H^(t-l) + e^(t)` as an `N = P, D = 1` series.
pub fn simulate_var(cfg: &VarConfig) -> Result<(TensorSeries, GroundTruthGraph)> {
    let lags = cfg.coefficients.len();
    if lags == 0 || cfg.t == 0 {
        return Err(Error::Config("VAR needs at least one lag matrix and t >= 1".into()));
    }
    let p = cfg.coefficients[0].rows();
    if cfg.coefficients.iter().any(|w| w.shape() != (p, p)) {
        return Err(Error::Config("VAR lag matrices must all be P x P".into()));
    }
    if cfg.check_stability {
        let radius = spectral_radius(&companion(&cfg.coefficients));
        if !(radius < 1.0) {
            return Err(Error::UnstableVar { radius });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    // history[0] is the most recent state
    let mut history: Vec<Vec<f64>> = match &cfg.initial {
        Some(init) => {
            if init.len() != lags || init.iter().any(|v| v.len() != p) {
                return Err(Error::Config(format!("VAR initial state must be {lags} vectors of length {p}")));
            }
            init.iter().rev().cloned().collect()
        }
        None => (0..lags).map(|_| (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect(),
    };
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cfg.t);
    // the initial states are the first recorded samples when there is no burn-in
    if cfg.burn_in == 0 {
        for s in history.iter().rev().take(cfg.t) {
            out.push(s.clone());
        }
    }
    let mut step = 0usize;
    while out.len() < cfg.t {
        let mut next = vec![0.0; p];
        for (l, w) in cfg.coefficients.iter().enumerate() {
            let prev = &history[l];
            for i in 0..p {
                let mut acc = 0.0;
                for j in 0..p {
                    acc += w[(i, j)] * prev[j];
                }
                next[i] += acc;
            }
        }
        if cfg.noise_std > 0.0 {
            for v in &mut next {
                *v += noise.sample(&mut rng);
            }
        }
        if next.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
            return Err(Error::BlowUp(format!("VAR state diverged at step {step}")));
        }
        history.pop();
        history.insert(0, next.clone());
        step += 1;
        if step > cfg.burn_in {
            out.push(next);
        }
    }
    let mut values = vec![0.0; p * cfg.t];
    for (k, state) in out.iter().enumerate() {
        for i in 0..p {
            values[i * cfg.t + k] = state[i];
        }
    }
    let ts = TensorSeries::with_default_meta(p, 1, cfg.t, values)?;
    Ok((ts, var_truth(&cfg.coefficients)))
}

/// Random sparse VAR(L) coefficients rescaled so the companion matrix has
/// spectral radius exactly `radius`. Each variable keeps its own lag-1 term
/// and receives `parents` other randomly chosen parents.
pub fn random_sparse_var(p: usize, lags: usize, parents: usize, radius: f64, seed: u64) -> Vec<Tensor2> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pattern = vec![vec![false; p]; p];
    for (i, row) in pattern.iter_mut().enumerate() {
        row[i] = true;
        let mut chosen = 0;
        while chosen < parents.min(p - 1) {
            let j = rng.random_range(0..p);
            if !row[j] {
                row[j] = true;
                chosen += 1;
            }
        }
    }
    let mut coefs: Vec<Tensor2> = (0..lags)
        .map(|_| {
            Tensor2::from_fn(p, p, |i, j| {
                if pattern[i][j] {
                    let mag = rng.random_range(0.3..1.0);
                    if rng.random_bool(0.5) { mag } else { -mag }
                } else {
                    0.0
                }
            })
        })
        .collect();
    let rho = spectral_radius(&companion(&coefs));
    if rho > 0.0 {
        let s = radius / rho;
        for (l, w) in coefs.iter_mut().enumerate() {
            *w = w.scale(s.powi(l as i32 + 1));
        }
    }
    coefs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_point_stays_constant() {
        let cfg = Lorenz96Config { initial_state: Some(vec![8.0; 6]), p: 6, forcing: 8.0, t: 50, ..Default::default() };
        let (ts, _) = simulate_lorenz96(&cfg).unwrap();
        assert!(ts.values().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn truth_has_four_parents_per_variable() {
        let g = lorenz96_truth(10);
        for i in 0..10 {
            let parents: Vec<usize> = (0..10).filter(|&j| g.is_edge(j, i)).collect();
            let mut expected = vec![(i + 8) % 10, (i + 9) % 10, i, (i + 1) % 10];
            expected.sort_unstable();
            assert_eq!(parents, expected);
        }
    }

    #[test]
    fn rejects_small_p_and_blow_up() {
        assert!(simulate_lorenz96(&Lorenz96Config { p: 3, ..Default::default() }).is_err());
        let cfg = Lorenz96Config { dt: 5.0, burn_in: 200, ..Default::default() };
        assert!(matches!(simulate_lorenz96(&cfg), Err(Error::BlowUp(_))));
    }

    #[test]
    fn identity_var_propagates() {
        let mut cfg = VarConfig::new(vec![Tensor2::identity(3)], 20, 0.0, 1);
        cfg.initial = Some(vec![vec![1.0, -2.0, 0.5]]);
        assert!(matches!(simulate_var(&cfg), Err(Error::UnstableVar { .. })));
        cfg.check_stability = false;
        let (ts, _) = simulate_var(&cfg).unwrap();
        for k in 0..20 {
            assert_eq!(ts.frame(k).data(), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn halving_var_decays_geometrically() {
        let mut cfg = VarConfig::new(vec![Tensor2::identity(2).scale(0.5)], 12, 0.0, 1);
        cfg.initial = Some(vec![vec![1.0, 1.0]]);
        let (ts, g) = simulate_var(&cfg).unwrap();
        for k in 0..12 {
            assert_eq!(ts.get(0, 0, k), 0.5f64.powi(k as i32));
        }
        assert!(g.is_edge(0, 0) && !g.is_edge(0, 1));
    }

    #[test]
    fn spectral_radius_of_rotation_and_nilpotent() {
        let rot = Tensor2::from_rows(&[vec![0.0, -0.9], vec![0.9, 0.0]]);
        assert!((spectral_radius(&rot) - 0.9).abs() < 1e-9);
        let nil = Tensor2::from_rows(&[vec![0.0, 3.0], vec![0.0, 0.0]]);
        assert_eq!(spectral_radius(&nil), 0.0);
    }

    #[test]
    fn same_seed_same_bits() {
        let cfg = Lorenz96Config { noise_std: 0.1, seed: 11, ..Default::default() };
        let (a, _) = simulate_lorenz96(&cfg).unwrap();
        let (b, _) = simulate_lorenz96(&cfg).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
