//! Tensor time series `X[N locations x D features x T timestamps]`.

mod io;
mod normalize;
mod split;
mod window;

pub use io::{read_tts, write_tts, LoadOptions, TTS_MAGIC};
pub use normalize::{NormStats, NormWarning};
pub use split::{RangeKind, SplitAccess, SplitSpec};
pub use window::{windows, SeriesWindow, WindowPlan};

use serde::{Deserialize, Serialize};

use crate::diffkit::Tensor2;
use crate::error::TtsError;

/// Axis metadata stored alongside the payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisMeta {
    pub location_ids: Vec<String>,
    pub feature_names: Vec<String>,
    /// Hourly epochs, strictly increasing with a uniform stride.
    pub timestamps: Vec<i64>,
}

/// Validated `N x D x T` array. Values are held in `f64`; files store `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSeries {
    n: usize,
    d: usize,
    t: usize,
    values: Vec<f64>,
    meta: AxisMeta,
}

impl TensorSeries {
    /// Builds a series from `values` laid out location-major, then feature, then time.
    pub fn new(n: usize, d: usize, t: usize, values: Vec<f64>, meta: AxisMeta) -> Result<Self, TtsError> {
        if values.len() != n * d * t {
            return Err(TtsError::AxisMismatch(format!("{} values for shape {n}x{d}x{t}", values.len())));
        }
        check_meta(n, d, t, &meta)?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (location, rest) = (pos / (d * t), pos % (d * t));
            return Err(TtsError::NonFinitePayload { location, feature: rest / t, step: rest % t });
        }
        Ok(Self { n, d, t, values, meta })
    }

    /// Default metadata: `loc{i}`, `f{j}` and hourly timestamps `0..T`.
    pub fn with_default_meta(n: usize, d: usize, t: usize, values: Vec<f64>) -> Result<Self, TtsError> {
        let meta = AxisMeta {
            location_ids: (0..n).map(|i| format!("loc{i}")).collect(),
            feature_names: (0..d).map(|j| format!("f{j}")).collect(),
            timestamps: (0..t as i64).collect(),
        };
        Self::new(n, d, t, values, meta)
    }

    pub fn from_fn(n: usize, d: usize, t: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self, TtsError> {
        let mut values = Vec::with_capacity(n * d * t);
        for i in 0..n {
            for j in 0..d {
                for k in 0..t {
                    values.push(f(i, j, k));
                }
            }
        }
        Self::with_default_meta(n, d, t, values)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.d, self.t)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn meta(&self) -> &AxisMeta {
        &self.meta
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(i * self.d + j) * self.t + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        debug_assert!(v.is_finite());
        self.values[(i * self.d + j) * self.t + k] = v;
    }

    /// The `N x D` slice at one timestamp.
    pub fn frame(&self, k: usize) -> Tensor2 {
        Tensor2::from_fn(self.n, self.d, |i, j| self.get(i, j, k))
    }

    /// The sub-series over timestamps `[start, end)`.
    pub fn slice_time(&self, start: usize, end: usize) -> TensorSeries {
        assert!(start <= end && end <= self.t, "slice_time [{start}, {end}) of T={}", self.t);
        let len = end - start;
        let mut values = Vec::with_capacity(self.n * self.d * len);
        for i in 0..self.n {
            for j in 0..self.d {
                let base = (i * self.d + j) * self.t;
                values.extend_from_slice(&self.values[base + start..base + end]);
            }
        }
        let meta = AxisMeta {
            location_ids: self.meta.location_ids.clone(),
            feature_names: self.meta.feature_names.clone(),
            timestamps: self.meta.timestamps[start..end].to_vec(),
        };
        TensorSeries { n: self.n, d: self.d, t: len, values, meta }
    }

    /// Assembles a series from per-timestamp `N x D` frames.
    pub fn from_frames(frames: &[Tensor2], meta: AxisMeta) -> Result<Self, TtsError> {
        let t = frames.len();
        let (n, d) = frames.first().map_or((meta.location_ids.len(), meta.feature_names.len()), Tensor2::shape);
        let mut values = vec![0.0; n * d * t];
        for (k, f) in frames.iter().enumerate() {
            if f.shape() != (n, d) {
                return Err(TtsError::AxisMismatch(format!("frame {k} has shape {:?}, expected ({n}, {d})", f.shape())));
            }
            for i in 0..n {
                for j in 0..d {
                    values[(i * d + j) * t + k] = f[(i, j)];
                }
            }
        }
        Self::new(n, d, t, values, meta)
    }

    /// Permutes the location axis: output location `i` is input location `perm[i]`.
    pub fn permute_locations(&self, perm: &[usize]) -> TensorSeries {
        assert_eq!(perm.len(), self.n);
        let block = self.d * self.t;
        let mut values = Vec::with_capacity(self.values.len());
        for &p in perm {
            values.extend_from_slice(&self.values[p * block..(p + 1) * block]);
        }
        let mut meta = self.meta.clone();
        meta.location_ids = perm.iter().map(|&p| self.meta.location_ids[p].clone()).collect();
        TensorSeries { n: self.n, d: self.d, t: self.t, values, meta }
    }
}

fn check_meta(n: usize, d: usize, t: usize, meta: &AxisMeta) -> Result<(), TtsError> {
    if meta.location_ids.len() != n {
        return Err(TtsError::AxisMismatch(format!("header N={n} but {} location ids", meta.location_ids.len())));
    }
    if meta.feature_names.len() != d {
        return Err(TtsError::AxisMismatch(format!("header D={d} but {} feature names", meta.feature_names.len())));
    }
    if meta.timestamps.len() != t {
        return Err(TtsError::AxisMismatch(format!("header T={t} but {} timestamps", meta.timestamps.len())));
    }
    let ts = &meta.timestamps;
    if ts.len() >= 2 {
        let stride = ts[1] - ts[0];
        if stride <= 0 {
            return Err(TtsError::NonMonotoneTimestamps(format!("{} then {}", ts[0], ts[1])));
        }
        for (k, w) in ts.windows(2).enumerate() {
            if w[1] - w[0] != stride {
                return Err(TtsError::NonMonotoneTimestamps(format!(
                    "step {k}: {} -> {} breaks stride {stride}",
                    w[0], w[1]
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_location_feature_time() {
        let ts = TensorSeries::with_default_meta(2, 1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(ts.get(1, 0, 2), 6.0);
        assert_eq!(ts.frame(1).data(), &[2.0, 5.0]);
    }

    #[test]
    fn rejects_irregular_stride() {
        let meta = AxisMeta {
            location_ids: vec!["a".into()],
            feature_names: vec!["x".into()],
            timestamps: vec![0, 1, 3],
        };
        let err = TensorSeries::new(1, 1, 3, vec![0.0; 3], meta).unwrap_err();
        assert!(matches!(err, TtsError::NonMonotoneTimestamps(_)));
    }

    #[test]
    fn frames_round_trip() {
        let ts = TensorSeries::from_fn(3, 2, 4, |i, j, k| (i * 100 + j * 10 + k) as f64).unwrap();
        let frames: Vec<_> = (0..4).map(|k| ts.frame(k)).collect();
        let back = TensorSeries::from_frames(&frames, ts.meta().clone()).unwrap();
        assert_eq!(back, ts);
    }
}
