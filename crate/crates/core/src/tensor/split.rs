use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::TensorSeries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeKind {
    Train,
    Validation,
    Test,
}

/// Train/validation/test assignment of timestamp intervals `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<(usize, usize)>,
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

impl SplitSpec {
    pub fn new(train: Vec<(usize, usize)>, validation: Vec<(usize, usize)>, test: Vec<(usize, usize)>, t: usize) -> Result<Self> {
        let spec = Self { train, validation, test };
        spec.validate(t)?;
        Ok(spec)
    }

    /// Leading `train_frac` for training, the next `val_frac` for validation, the rest for test.
    pub fn chronological(t: usize, train_frac: f64, val_frac: f64) -> Result<Self> {
        if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
            return Err(Error::Config(format!("bad split fractions {train_frac}/{val_frac}")));
        }
        let a = (t as f64 * train_frac).round() as usize;
        let b = ((t as f64 * (train_frac + val_frac)).round() as usize).min(t);
        Self::new(vec![(0, a)], vec![(a, b)], vec![(b, t)], t)
    }

    /// Rotating block cross-validation: `[0, t)` is cut into `blocks` equal
    /// blocks; group `g` tests on block `g`, validates on block `g - 1`
    /// (cyclically) and trains on the rest.
    pub fn rotating(t: usize, blocks: usize, group: usize) -> Result<Self> {
        if blocks < 3 || group >= blocks {
            return Err(Error::Config(format!("rotating split needs >= 3 blocks and group < blocks (got {blocks}, {group})")));
        }
        let edge = |b: usize| b * t / blocks;
        let block = |b: usize| (edge(b), edge(b + 1));
        let val = (group + blocks - 1) % blocks;
        let train = (0..blocks).filter(|&b| b != group && b != val).map(block).collect();
        Self::new(train, vec![block(val)], vec![block(group)], t)
    }

    pub fn ranges(&self, kind: RangeKind) -> &[(usize, usize)] {
        match kind {
            RangeKind::Train => &self.train,
            RangeKind::Validation => &self.validation,
            RangeKind::Test => &self.test,
        }
    }

    pub fn validate(&self, t: usize) -> Result<()> {
        let mut all: Vec<(usize, usize)> = self.train.iter().chain(&self.validation).chain(&self.test).copied().collect();
        for &(a, b) in &all {
            if a > b || b > t {
                return Err(Error::Config(format!("split range [{a}, {b}) outside [0, {t})")));
            }
        }
        all.sort_unstable();
        for w in all.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(Error::Config(format!("split ranges {:?} and {:?} overlap", w[0], w[1])));
            }
        }
        Ok(())
    }

    /// Every timestamp covered by ranges of `kind`, ascending.
    pub fn indices(&self, kind: RangeKind) -> Vec<usize> {
        let mut v: Vec<usize> = self.ranges(kind).iter().flat_map(|&(a, b)| a..b).collect();
        v.sort_unstable();
        v
    }
}

/// Guards a series so test timestamps cannot be read before [`SplitAccess::unlock_test`].
#[derive(Debug)]
pub struct SplitAccess<'a> {
    series: &'a TensorSeries,
    split: &'a SplitSpec,
    test_unlocked: Cell<bool>,
}

impl<'a> SplitAccess<'a> {
    pub fn new(series: &'a TensorSeries, split: &'a SplitSpec) -> Result<Self> {
        split.validate(series.t())?;
        Ok(Self { series, split, test_unlocked: Cell::new(false) })
    }

    pub fn split(&self) -> &SplitSpec {
        self.split
    }

    pub fn unlock_test(&self) {
        self.test_unlocked.set(true);
    }

    pub fn test_unlocked(&self) -> bool {
        self.test_unlocked.get()
    }

    /// The full series; only once the test ranges are unlocked.
    pub fn full(&self) -> Result<&'a TensorSeries> {
        self.check(RangeKind::Test)?;
        Ok(self.series)
    }

    /// Sub-series for one range of `kind`.
    pub fn range(&self, kind: RangeKind, index: usize) -> Result<TensorSeries> {
        self.check(kind)?;
        let (a, b) = *self
            .split
            .ranges(kind)
            .get(index)
            .ok_or_else(|| Error::Contract(format!("no {kind:?} range #{index}")))?;
        Ok(self.series.slice_time(a, b))
    }

    /// Reads timestamps `[a, b)`, refusing any overlap with a locked test range.
    pub fn span(&self, a: usize, b: usize) -> Result<TensorSeries> {
        if !self.test_unlocked.get() && self.split.test.iter().any(|&(x, y)| a < y && x < b) {
            return Err(Error::AccessDenied(format!("test (timestamps [{a}, {b}))")));
        }
        Ok(self.series.slice_time(a, b))
    }

    /// The series with every locked timestamp zeroed, so indices stay aligned.
    pub fn observed(&self) -> TensorSeries {
        let mut out = self.series.clone();
        if !self.test_unlocked.get() {
            for &(a, b) in &self.split.test {
                for i in 0..out.n() {
                    for j in 0..out.d() {
                        for k in a..b {
                            out.set(i, j, k, 0.0);
                        }
                    }
                }
            }
        }
        out
    }

    fn check(&self, kind: RangeKind) -> Result<()> {
        if kind == RangeKind::Test && !self.test_unlocked.get() {
            return Err(Error::AccessDenied("test".into()));
        }
        Ok(())
    }
}
