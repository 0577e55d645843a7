//! Wall-clock summaries with warmup exclusion.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::Result;

/// Median and interquartile range of per-call durations, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    /// Calls kept after warmup.
    pub n: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(samples: &[f64]) -> TimingSummary {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let q1 = quantile(&s, 0.25);
    let q3 = quantile(&s, 0.75);
    TimingSummary {
        median: quantile(&s, 0.5),
        q1,
        q3,
        iqr: q3 - q1,
        n: s.len(),
    }
}

/// Number of leading calls discarded as warmup.
pub fn warmup_count(n_calls: usize) -> usize {
    n_calls / 10
}

/// Times `n_calls` calls of `f` and summarizes all but the warmup.
pub fn time_calls<F: FnMut() -> Result<()>>(n_calls: usize, mut f: F) -> Result<TimingSummary> {
    let mut samples = Vec::with_capacity(n_calls);
    for _ in 0..n_calls {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    Ok(summarize(&samples[warmup_count(n_calls)..]))
}
