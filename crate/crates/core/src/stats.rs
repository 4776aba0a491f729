//! Statistical primitives shared by the attacks: correlation, Fisher
//! confidence intervals, windowed correlation maxima, entropy metrics, and
//! micro-timescale exclusivity.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::relay::RelayId;
use crate::trace::{align_to, ThroughputTrace};

/// Any traffic at all counts as activity.
pub const DEFAULT_ACTIVE_THRESHOLD: f64 = 1.0;

/// 50 cells of 512 bytes: the batch the stream window moves in.
pub const BATCH_BYTES: f64 = 25_600.0;

/// A window's variance is treated as zero when it is at most this fraction
/// of the window's centered energy; such windows are skipped by the
/// windowed scan rather than reported as spurious ±1 correlations.
pub const ZERO_VARIANCE_FRACTION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub n: usize,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
}

/// Posterior over which relay bottlenecks a target circuit, reduced to the
/// candidate set S, the calibrated probability that the true relay is in S,
/// and the resulting entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckPosterior {
    pub candidate_set: BTreeSet<RelayId>,
    pub inclusion_probability: f64,
    pub universe_size: usize,
    pub entropy_bits: f64,
}

/// Pearson product-moment correlation over two aligned windows.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Degenerate(format!(
            "pearson windows differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate(format!("pearson needs n >= 2, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut ex = 0.0;
    let mut ey = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
        ex += a * a;
        ey += b * b;
    }
    if sxx <= ZERO_VARIANCE_FRACTION * ex.max(f64::MIN_POSITIVE) {
        return Err(Error::ZeroVariance("first"));
    }
    if syy <= ZERO_VARIANCE_FRACTION * ey.max(f64::MIN_POSITIVE) {
        return Err(Error::ZeroVariance("second"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Confidence interval for a correlation via Fisher's Z transform:
/// z = atanh(r), half-width z_crit/sqrt(n-3), mapped back through tanh.
pub fn fisher_ci(r: f64, n: usize, level: f64) -> Result<(f64, f64)> {
    if n <= 3 {
        return Err(Error::Degenerate(format!("fisher_ci needs n > 3, got {n}")));
    }
    if !(r.abs() < 1.0) {
        return Err(Error::Degenerate(format!("fisher_ci needs |r| < 1, got {r}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Degenerate(format!("confidence level must be in (0,1), got {level}")));
    }
    let z = r.atanh();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let z_crit = normal.inverse_cdf((1.0 + level) / 2.0);
    let half = z_crit / ((n - 3) as f64).sqrt();
    Ok(((z - half).tanh(), (z + half).tanh()))
}

/// Pearson plus its Fisher interval in one record.
pub fn correlate(x: &[f64], y: &[f64], level: f64) -> Result<CorrelationResult> {
    let r = pearson(x, y)?;
    let n = x.len();
    let (ci_low, ci_high) = if n > 3 && r.abs() < 1.0 {
        fisher_ci(r, n, level)?
    } else {
        (r, r)
    };
    Ok(CorrelationResult { r, n, ci_low, ci_high, level })
}

/// The maximizing interval found by [`windowed_max_correlation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowedMax {
    pub r_max: f64,
    /// Absolute start of the maximizing window, seconds.
    pub window_start: f64,
    /// Length of the maximizing window, seconds.
    pub window_len: f64,
}

/// Maximum Pearson correlation over every aligned contiguous interval of at
/// least `min_window` seconds. When the total overlap is shorter than
/// `min_window`, this degrades to plain correlation over the full overlap.
/// Intervals whose variance is zero (per [`ZERO_VARIANCE_FRACTION`]) are
/// skipped.
pub fn windowed_max_correlation(
    x: &ThroughputTrace,
    y: &ThroughputTrace,
    min_window: f64,
) -> Result<WindowedMax> {
    let aligned = crate::trace::align(x, y)?;
    let n = aligned.x.len();
    let interval = aligned.interval;
    let min_len = ((min_window / interval) - 1e-9).ceil().max(2.0) as usize;
    let min_len = min_len.min(n).max(2);
    if n < 2 {
        return Err(Error::NoValidInterval);
    }

    // Center globally: leaves every interval's correlation unchanged but
    // keeps the rolling moments well conditioned.
    let mx = aligned.x.iter().sum::<f64>() / n as f64;
    let my = aligned.y.iter().sum::<f64>() / n as f64;
    let xc: Vec<f64> = aligned.x.iter().map(|v| v - mx).collect();
    let yc: Vec<f64> = aligned.y.iter().map(|v| v - my).collect();

    let mut px = vec![0.0f64; n + 1];
    let mut py = vec![0.0f64; n + 1];
    let mut pxx = vec![0.0f64; n + 1];
    let mut pyy = vec![0.0f64; n + 1];
    let mut pxy = vec![0.0f64; n + 1];
    for i in 0..n {
        px[i + 1] = px[i] + xc[i];
        py[i + 1] = py[i] + yc[i];
        pxx[i + 1] = pxx[i] + xc[i] * xc[i];
        pyy[i + 1] = pyy[i] + yc[i] * yc[i];
        pxy[i + 1] = pxy[i] + xc[i] * yc[i];
    }

    let mut best: Option<(f64, usize, usize)> = None;
    for start in 0..n {
        for end in (start + min_len)..=n {
            let m = (end - start) as f64;
            let sx = px[end] - px[start];
            let sy = py[end] - py[start];
            let exx = pxx[end] - pxx[start];
            let eyy = pyy[end] - pyy[start];
            let exy = pxy[end] - pxy[start];
            let varx = exx - sx * sx / m;
            let vary = eyy - sy * sy / m;
            if varx <= ZERO_VARIANCE_FRACTION * exx.max(f64::MIN_POSITIVE)
                || vary <= ZERO_VARIANCE_FRACTION * eyy.max(f64::MIN_POSITIVE)
            {
                continue;
            }
            let cov = exy - sx * sy / m;
            let r = (cov / (varx.sqrt() * vary.sqrt())).clamp(-1.0, 1.0);
            if best.map_or(true, |(b, _, _)| r > b) {
                best = Some((r, start, end));
            }
        }
    }
    match best {
        Some((r_max, s, e)) => Ok(WindowedMax {
            r_max,
            window_start: aligned.start + s as f64 * interval,
            window_len: (e - s) as f64 * interval,
        }),
        None => Err(Error::NoValidInterval),
    }
}

/// Shannon entropy of a distribution, in bits.
pub fn entropy(p: &[f64]) -> Result<f64> {
    validate_distribution(p)?;
    Ok(p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.log2())
        .sum())
}

/// Entropy of the relay identity given a candidate set of size `s_size` that
/// contains the true relay with probability `p_rs`, out of `n` relays:
/// P·log2(|S|/P) + (1−P)·log2((N−|S|)/(1−P)), limiting terms dropped at
/// P ∈ {0, 1}.
pub fn conditional_set_entropy(s_size: usize, p_rs: f64, n: usize) -> Result<f64> {
    if s_size == 0 || s_size > n {
        return Err(Error::Domain(format!("candidate set size {s_size} outside 1..={n}")));
    }
    if !(0.0..=1.0).contains(&p_rs) {
        return Err(Error::Domain(format!("inclusion probability {p_rs} outside [0,1]")));
    }
    if s_size == n && p_rs < 1.0 {
        return Err(Error::Domain(
            "set covers the whole universe but inclusion probability < 1".into(),
        ));
    }
    let mut bits = 0.0;
    if p_rs > 0.0 {
        bits += p_rs * (s_size as f64 / p_rs).log2();
    }
    if p_rs < 1.0 {
        bits += (1.0 - p_rs) * ((n - s_size) as f64 / (1.0 - p_rs)).log2();
    }
    Ok(bits)
}

/// Σ P(o)·H(C|o) over observation outcomes given as (probability, bits).
pub fn weighted_entropy(observations: &[(f64, f64)]) -> Result<f64> {
    let weights: Vec<f64> = observations.iter().map(|(p, _)| *p).collect();
    validate_distribution(&weights)?;
    if let Some((_, h)) = observations.iter().find(|(_, h)| !h.is_finite()) {
        return Err(Error::InvalidDistribution(format!("non-finite entropy term {h}")));
    }
    Ok(observations.iter().map(|(p, h)| p * h).sum())
}

/// The time one 50-cell batch takes at the observed mean throughput; the
/// natural sampling scale for exclusivity tests.
pub fn micro_timescale(mean_throughput: f64) -> Result<f64> {
    if !(mean_throughput > 0.0) {
        return Err(Error::Domain(format!(
            "micro timescale needs positive throughput, got {mean_throughput}"
        )));
    }
    Ok(BATCH_BYTES / mean_throughput)
}

/// Fraction of buckets where exactly one of the two traces is active, out of
/// buckets where at least one is, after rebucketing both to `bucket` seconds.
pub fn mutual_exclusivity(
    x: &ThroughputTrace,
    y: &ThroughputTrace,
    bucket: f64,
    active_threshold: f64,
) -> Result<f64> {
    if bucket + 1e-12 < x.interval || bucket + 1e-12 < y.interval {
        return Err(Error::Degenerate(format!(
            "bucket {bucket} s finer than a trace interval"
        )));
    }
    let aligned = align_to(x, y, bucket)?;
    let mut either = 0usize;
    let mut exactly_one = 0usize;
    for (a, b) in aligned.x.iter().zip(&aligned.y) {
        let xa = *a > active_threshold;
        let ya = *b > active_threshold;
        if xa || ya {
            either += 1;
            if xa != ya {
                exactly_one += 1;
            }
        }
    }
    if either == 0 {
        return Err(Error::NoActivity);
    }
    Ok(exactly_one as f64 / either as f64)
}

fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty distribution".into()));
    }
    if let Some(bad) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidDistribution(format!("entry {bad} is not a probability")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(start: f64, interval: f64, samples: Vec<f64>) -> ThroughputTrace {
        ThroughputTrace::new(start, interval, samples).unwrap()
    }

    #[test]
    fn pearson_perfect_and_inverse() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let negx: Vec<f64> = x.iter().map(|v| 10.0 - v).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &negx).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_frozen_value() {
        // Frozen from a definitional evaluation: x=(1,2,3,5), y=(2,1,4,6),
        // r = 10.25 / sqrt(8.75 * 14.75).
        let r = pearson(&[1.0, 2.0, 3.0, 5.0], &[2.0, 1.0, 4.0, 6.0]).unwrap();
        assert!((r - 0.9022436386781062).abs() < 1e-12, "r = {r}");
    }

    #[test]
    fn pearson_zero_variance_is_an_error() {
        let flat = vec![5.0; 4];
        let x = vec![1.0, 2.0, 3.0, 4.0];
        assert!(matches!(pearson(&flat, &x), Err(Error::ZeroVariance("first"))));
        assert!(matches!(pearson(&x, &flat), Err(Error::ZeroVariance("second"))));
    }

    #[test]
    fn fisher_frozen_value_and_symmetry() {
        // Frozen from direct evaluation of tanh(atanh(0.8) ± 1.959964/10).
        let (lo, hi) = fisher_ci(0.8, 103, 0.95).unwrap();
        assert!((lo - 0.717569207482649).abs() < 1e-12, "lo = {lo}");
        assert!((hi - 0.8603287919356915).abs() < 1e-12, "hi = {hi}");

        let (lo, hi) = fisher_ci(0.0, 50, 0.95).unwrap();
        assert!((lo + hi).abs() < 1e-12, "interval about 0 must be symmetric");
    }

    #[test]
    fn fisher_width_shrinks_with_n() {
        let mut last = f64::INFINITY;
        for n in [5usize, 10, 100, 1000] {
            let (lo, hi) = fisher_ci(0.5, n, 0.95).unwrap();
            let w = hi - lo;
            assert!(w < last);
            last = w;
        }
    }

    #[test]
    fn fisher_rejects_degenerate_inputs() {
        assert!(fisher_ci(0.5, 3, 0.95).is_err());
        assert!(fisher_ci(1.0, 10, 0.95).is_err());
        assert!(fisher_ci(-1.0, 10, 0.95).is_err());
    }

    #[test]
    fn windowed_max_identical_traces() {
        let t = tr(0.0, 1.0, vec![1.0, 5.0, 2.0, 8.0, 3.0, 9.0]);
        let w = windowed_max_correlation(&t, &t, 2.0).unwrap();
        assert!((w.r_max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn windowed_max_single_candidate_equals_pearson() {
        let x = tr(0.0, 1.0, vec![1.0, 2.0, 3.0, 5.0]);
        let y = tr(0.0, 1.0, vec![2.0, 1.0, 4.0, 6.0]);
        let w = windowed_max_correlation(&x, &y, 4.0).unwrap();
        let direct = pearson(&x.samples, &y.samples).unwrap();
        assert!((w.r_max - direct).abs() < 1e-12);
        assert_eq!(w.window_len, 4.0);
    }

    #[test]
    fn windowed_max_short_overlap_degrades_to_plain_pearson() {
        // Overlap (3 samples) shorter than the 10 s window: plain correlation
        // over the full overlap.
        let x = tr(0.0, 1.0, vec![1.0, 2.0, 4.0]);
        let y = tr(0.0, 1.0, vec![1.5, 2.1, 3.9]);
        let w = windowed_max_correlation(&x, &y, 10.0).unwrap();
        let direct = pearson(&x.samples, &y.samples).unwrap();
        assert!((w.r_max - direct).abs() < 1e-12);
    }

    #[test]
    fn windowed_max_beats_full_trace_pearson() {
        // First half correlates, second half anticorrelates.
        let x = tr(0.0, 1.0, vec![1.0, 2.0, 3.0, 4.0, 4.0, 3.0, 2.0, 1.0]);
        let y = tr(0.0, 1.0, vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let w = windowed_max_correlation(&x, &y, 3.0).unwrap();
        let full = pearson(&x.samples, &y.samples).unwrap();
        assert!(w.r_max >= full);
        assert!(w.r_max > 0.99);
    }

    #[test]
    fn entropy_known_values() {
        assert!((entropy(&[1.0]).unwrap() - 0.0).abs() < 1e-12);
        assert!((entropy(&[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-12);
        let uniform25 = vec![1.0 / 25.0; 25];
        assert!((entropy(&uniform25).unwrap() - 4.643856189774724).abs() < 1e-9);
        assert!(entropy(&[0.5, 0.4]).is_err());
        assert!(entropy(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn conditional_set_entropy_cases() {
        assert_eq!(conditional_set_entropy(1, 1.0, 25).unwrap(), 0.0);
        // P = 1 reduces to uniform over S.
        assert!((conditional_set_entropy(8, 1.0, 25).unwrap() - 3.0).abs() < 1e-12);
        // Frozen from direct formula evaluation: |S|=5, P=0.9, N=25.
        let h = conditional_set_entropy(5, 0.9, 25).unwrap();
        assert!((h - 2.9909236884766432).abs() < 1e-12, "h = {h}");
        // Whole-universe set with P < 1 leaves the second term undefined.
        assert!(conditional_set_entropy(25, 0.9, 25).is_err());
        assert!(conditional_set_entropy(0, 0.5, 25).is_err());
        assert!(conditional_set_entropy(5, 1.2, 25).is_err());
    }

    #[test]
    fn weighted_entropy_cases() {
        assert!((weighted_entropy(&[(1.0, 2.5)]).unwrap() - 2.5).abs() < 1e-12);
        assert!((weighted_entropy(&[(0.5, 2.0), (0.5, 4.0)]).unwrap() - 3.0).abs() < 1e-12);
        assert!(weighted_entropy(&[(0.7, 2.0), (0.7, 4.0)]).is_err());
    }

    #[test]
    fn micro_timescale_known_points() {
        assert!((micro_timescale(25_600.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((micro_timescale(51_200.0).unwrap() - 0.5).abs() < 1e-12);
        // 450 Kb/s in 1024-bit kilobits = 57,600 B/s.
        let t = micro_timescale(450.0 * 1024.0 / 8.0).unwrap();
        assert!((t - 0.4444444444444444).abs() < 1e-12);
        assert!((t - 0.45).abs() < 0.01);
        assert!(micro_timescale(0.0).is_err());
    }

    #[test]
    fn exclusivity_alternating_and_identical() {
        let x = tr(0.0, 1.0, vec![10.0, 0.0, 10.0, 0.0, 10.0, 0.0]);
        let y = tr(0.0, 1.0, vec![0.0, 10.0, 0.0, 10.0, 0.0, 10.0]);
        assert!((mutual_exclusivity(&x, &y, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((mutual_exclusivity(&x, &x, 1.0, 1.0).unwrap() - 0.0).abs() < 1e-12);
        // Swapping arguments changes nothing.
        let a = mutual_exclusivity(&x, &y, 1.0, 1.0).unwrap();
        let b = mutual_exclusivity(&y, &x, 1.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exclusivity_rejects_fine_buckets_and_dead_air() {
        let x = tr(0.0, 1.0, vec![10.0, 0.0]);
        let y = tr(0.0, 1.0, vec![0.0, 10.0]);
        assert!(mutual_exclusivity(&x, &y, 0.5, 1.0).is_err());
        let dead = tr(0.0, 1.0, vec![0.0, 0.0]);
        assert!(matches!(
            mutual_exclusivity(&dead, &dead, 1.0, 1.0),
            Err(Error::NoActivity)
        ));
    }

    #[test]
    fn correlate_packs_ci() {
        let x = vec![1.0, 2.0, 3.0, 5.0, 4.0, 6.0];
        let y = vec![2.0, 1.0, 4.0, 6.0, 5.0, 7.0];
        let c = correlate(&x, &y, 0.95).unwrap();
        assert!(c.ci_low <= c.r && c.r <= c.ci_high);
        assert_eq!(c.n, 6);
    }
}
