//! Throughput time series, the observable every attack consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A uniformly sampled throughput series. Sample `k` is the mean rate in
/// bytes/second over `[start + k*interval, start + (k+1)*interval)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputTrace {
    pub start: f64,
    pub interval: f64,
    pub samples: Vec<f64>,
}

impl ThroughputTrace {
    pub fn new(start: f64, interval: f64, samples: Vec<f64>) -> Result<Self> {
        if !(interval > 0.0) || !interval.is_finite() {
            return Err(Error::Degenerate(format!(
                "trace interval must be positive, got {interval}"
            )));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::Degenerate(format!(
                "trace samples must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(ThroughputTrace { start, interval, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn end(&self) -> f64 {
        self.start + self.interval * self.samples.len() as f64
    }

    pub fn duration(&self) -> f64 {
        self.interval * self.samples.len() as f64
    }

    /// Unweighted mean rate over all samples; 0 for an empty trace.
    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Sub-trace of the samples whose interval midpoint falls in `[from, to)`
    /// (absolute seconds).
    pub fn slice(&self, from: f64, to: f64) -> ThroughputTrace {
        let mut first = self.samples.len();
        let mut last = 0usize;
        for k in 0..self.samples.len() {
            let mid = self.start + (k as f64 + 0.5) * self.interval;
            if mid >= from && mid < to {
                if k < first {
                    first = k;
                }
                last = k + 1;
            }
        }
        if first >= last {
            return ThroughputTrace { start: from, interval: self.interval, samples: vec![] };
        }
        ThroughputTrace {
            start: self.start + first as f64 * self.interval,
            interval: self.interval,
            samples: self.samples[first..last].to_vec(),
        }
    }

    /// The first `duration` seconds of the trace.
    pub fn prefix(&self, duration: f64) -> ThroughputTrace {
        self.slice(self.start, self.start + duration)
    }

    /// Reaggregate to a coarser sampling interval by mean aggregation,
    /// anchored at `start`. Trailing samples that do not fill a whole bucket
    /// are dropped.
    pub fn rebucket(&self, bucket: f64) -> Result<ThroughputTrace> {
        if bucket < self.interval - 1e-12 {
            return Err(Error::Degenerate(format!(
                "bucket {bucket} s finer than trace interval {} s",
                self.interval
            )));
        }
        let aligned = align_to(self, self, bucket)?;
        Ok(ThroughputTrace { start: aligned.start, interval: bucket, samples: aligned.x })
    }
}

/// Two traces resampled onto one shared grid over their overlap.
#[derive(Debug, Clone)]
pub struct Aligned {
    pub start: f64,
    pub interval: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Align two traces by resampling the finer one to the coarser interval via
/// mean aggregation over their overlapping span.
pub fn align(a: &ThroughputTrace, b: &ThroughputTrace) -> Result<Aligned> {
    align_to(a, b, a.interval.max(b.interval))
}

/// Align two traces onto buckets of `interval` seconds (must be at least as
/// coarse as both traces). Buckets are anchored at the overlap start; a
/// source sample belongs to the bucket containing its midpoint; only buckets
/// fully inside the overlap are kept.
pub fn align_to(a: &ThroughputTrace, b: &ThroughputTrace, interval: f64) -> Result<Aligned> {
    if interval < a.interval - 1e-12 || interval < b.interval - 1e-12 {
        return Err(Error::Degenerate(format!(
            "alignment interval {interval} s finer than a source trace"
        )));
    }
    let t0 = a.start.max(b.start);
    let t1 = a.end().min(b.end());
    // Tolerate fp slop so a span of exactly k buckets yields k.
    let n = ((t1 - t0) / interval + 1e-9).floor() as i64;
    if n <= 0 {
        return Err(Error::Degenerate("traces do not overlap by a full bucket".into()));
    }
    let n = n as usize;
    let x = bucket_means(a, t0, interval, n)?;
    let y = bucket_means(b, t0, interval, n)?;
    Ok(Aligned { start: t0, interval, x, y })
}

fn bucket_means(t: &ThroughputTrace, t0: f64, interval: f64, n: usize) -> Result<Vec<f64>> {
    let mut sums = vec![0.0f64; n];
    let mut counts = vec![0u32; n];
    for (k, s) in t.samples.iter().enumerate() {
        let mid = t.start + (k as f64 + 0.5) * t.interval;
        if mid < t0 {
            continue;
        }
        let idx = ((mid - t0) / interval).floor() as usize;
        if idx >= n {
            break;
        }
        sums[idx] += s;
        counts[idx] += 1;
    }
    if let Some(i) = counts.iter().position(|c| *c == 0) {
        return Err(Error::Degenerate(format!("alignment bucket {i} covers no source sample")));
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s / c as f64)
        .collect())
}
