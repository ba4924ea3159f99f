use serde::{Deserialize, Serialize};

/// A contiguous run of timestamps `[start, start + length)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesWindow {
    pub start: usize,
    pub length: usize,
}

impl SeriesWindow {
    pub fn end(&self) -> usize {
        self.start + self.length
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }
}

/// Input/target window pairs in chronological order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowPlan {
    pub pairs: Vec<(SeriesWindow, SeriesWindow)>,
    /// Why the plan is empty, when it is.
    pub diagnostic: Option<String>,
}

/// Splits `[range.0, range.1)` into input windows of `lag` steps each followed
/// immediately by a target window of `horizon` steps, advancing by `stride`
/// (defaults to `horizon`, i.e. non-overlapping targets).
pub fn windows(range: (usize, usize), lag: usize, horizon: usize, stride: Option<usize>) -> WindowPlan {
    let (lo, hi) = range;
    let stride = stride.unwrap_or(horizon);
    if lag == 0 || horizon == 0 || stride == 0 {
        return WindowPlan {
            pairs: Vec::new(),
            diagnostic: Some(format!("lag ({lag}), horizon ({horizon}) and stride ({stride}) must all be >= 1")),
        };
    }
    let span = hi.saturating_sub(lo);
    if lag + horizon > span {
        return WindowPlan {
            pairs: Vec::new(),
            diagnostic: Some(format!("series of length {span} is shorter than lag {lag} + horizon {horizon}")),
        };
    }
    let mut pairs = Vec::new();
    let mut start = lo;
    while start + lag + horizon <= hi {
        pairs.push((SeriesWindow { start, length: lag }, SeriesWindow { start: start + lag, length: horizon }));
        start += stride;
    }
    WindowPlan { pairs, diagnostic: None }
}
