use serde::{Deserialize, Serialize};

use super::TensorSeries;

/// Per-feature statistics fitted on training timestamps only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features with zero variance on the training ranges; passed through untouched.
    pub constant: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormWarning {
    pub feature: usize,
    pub name: String,
    pub message: String,
}

impl NormStats {
    /// Population mean and standard deviation per feature over every location
    /// and every timestamp in `ranges` (half-open `[start, end)`).
    pub fn fit(ts: &TensorSeries, ranges: &[(usize, usize)]) -> (Self, Vec<NormWarning>) {
        let (n, d, _) = ts.shape();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        let mut constant = vec![false; d];
        let mut warnings = Vec::new();
        for j in 0..d {
            let mut count = 0usize;
            let mut sum = 0.0;
            for &(a, b) in ranges {
                for i in 0..n {
                    for k in a..b {
                        sum += ts.get(i, j, k);
                        count += 1;
                    }
                }
            }
            let m = if count > 0 { sum / count as f64 } else { 0.0 };
            let mut ss = 0.0;
            for &(a, b) in ranges {
                for i in 0..n {
                    for k in a..b {
                        let dv = ts.get(i, j, k) - m;
                        ss += dv * dv;
                    }
                }
            }
            let s = if count > 0 { (ss / count as f64).sqrt() } else { 0.0 };
            mean[j] = m;
            std[j] = s;
            if !(s > 1e-12 * m.abs().max(1.0)) {
                constant[j] = true;
                let name = ts.meta().feature_names[j].clone();
                log::warn!("feature {name} is constant on the training ranges; left unscaled");
                warnings.push(NormWarning { feature: j, name, message: "constant on training ranges; passed through unscaled".into() });
            }
        }
        (Self { mean, std, constant }, warnings)
    }

    pub fn normalize(&self, ts: &TensorSeries) -> TensorSeries {
        self.apply(ts, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, ts: &TensorSeries) -> TensorSeries {
        self.apply(ts, |v, m, s| v * s + m)
    }

    fn apply(&self, ts: &TensorSeries, f: impl Fn(f64, f64, f64) -> f64) -> TensorSeries {
        let (n, d, t) = ts.shape();
        assert_eq!(d, self.mean.len(), "stats for {} features, series has {d}", self.mean.len());
        let mut out = ts.clone();
        for i in 0..n {
            for j in 0..d {
                if self.constant[j] {
                    continue;
                }
                for k in 0..t {
                    out.set(i, j, k, f(ts.get(i, j, k), self.mean[j], self.std[j]));
                }
            }
        }
        out
    }
}
