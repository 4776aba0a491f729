//! The attack procedures: shared-relay fingerprinting, bottleneck
//! identification with entropy accounting, throughput-based elimination,
//! guard disclosure, hidden-service detection, and stream linkability.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::relay::RelayId;
use crate::stats::{self, BottleneckPosterior, DEFAULT_ACTIVE_THRESHOLD};
use crate::trace::{align_to, ThroughputTrace};
use crate::{Error, Result};

/// Correlation threshold most results are reported at.
pub const DEFAULT_CORRELATION_THRESHOLD: f64 = 0.4;
pub const DEFAULT_EXCLUSIVITY_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_WINDOW: f64 = 200.0;
/// Rendezvous circuits put this many forwarding nodes between the two ends.
pub const DEFAULT_RENDEZVOUS_HOPS: usize = 8;
/// Bucket width for the macro correlation step of stream linking, seconds.
pub const MACRO_BUCKET: f64 = 1.0;

/// Outcome of a shared-relay test between a target and a probe trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerprintVerdict {
    pub r_max: f64,
    /// Length of the maximizing window, seconds.
    pub window_used: f64,
    pub threshold: f64,
    pub shared: bool,
}

/// Windowed max correlation against a fixed decision threshold.
pub fn fingerprint_pair(
    target: &ThroughputTrace,
    probe: &ThroughputTrace,
    threshold: f64,
    min_window: f64,
) -> Result<FingerprintVerdict> {
    let wm = stats::windowed_max_correlation(target, probe, min_window)?;
    Ok(FingerprintVerdict {
        r_max: wm.r_max,
        window_used: wm.window_len,
        threshold,
        shared: wm.r_max > threshold,
    })
}

/// Fingerprints the target against a probe per candidate relay; the relays
/// whose probes correlate form the candidate set S, scored with the
/// calibrated probability that the true bottleneck lands in S. An empty S
/// says nothing, so the posterior falls back to the uniform prior. When S
/// covers the whole universe the inclusion probability is forced to 1.
pub fn identify_bottleneck(
    target: &ThroughputTrace,
    probes: &BTreeMap<RelayId, ThroughputTrace>,
    threshold: f64,
    min_window: f64,
    inclusion_probability: f64,
) -> Result<BottleneckPosterior> {
    let universe = probes.len();
    let mut set = BTreeSet::new();
    for (id, probe) in probes {
        if fingerprint_pair(target, probe, threshold, min_window)?.shared {
            set.insert(*id);
        }
    }
    posterior_from_set(set, universe, inclusion_probability)
}

/// Entropy accounting for an already-formed candidate set.
pub fn posterior_from_set(
    set: BTreeSet<RelayId>,
    universe: usize,
    inclusion_probability: f64,
) -> Result<BottleneckPosterior> {
    let (p, entropy) = if set.is_empty() {
        (0.0, (universe as f64).log2())
    } else {
        let p = if set.len() == universe { 1.0 } else { inclusion_probability };
        (p, stats::conditional_set_entropy(set.len(), p, universe)?)
    };
    Ok(BottleneckPosterior {
        candidate_set: set,
        inclusion_probability: p,
        universe_size: universe,
        entropy_bits: entropy,
    })
}

/// Drops every relay whose probe averaged less than the target's running
/// mean over some completed `subinterval` within the first `elapsed`
/// seconds. Verdicts are judged at each subinterval's completion and never
/// retracted, so survivors only shrink as `elapsed` grows.
pub fn eliminate_by_throughput(
    target: &ThroughputTrace,
    probes: &BTreeMap<RelayId, ThroughputTrace>,
    elapsed: f64,
    subinterval: f64,
) -> BTreeSet<RelayId> {
    let mut survivors: BTreeSet<RelayId> = probes.keys().copied().collect();
    if !(subinterval > 0.0) {
        return survivors;
    }
    let mut k = 0usize;
    loop {
        let t_end = target.start + (k as f64 + 1.0) * subinterval;
        if t_end > target.start + elapsed + 1e-9 {
            break;
        }
        let running = target.slice(target.start, t_end);
        if running.is_empty() {
            k += 1;
            continue;
        }
        let target_mean = running.mean();
        for (id, probe) in probes {
            let sub = probe.slice(target.start + k as f64 * subinterval, t_end);
            if !sub.is_empty() && sub.mean() < target_mean {
                survivors.remove(id);
            }
        }
        k += 1;
    }
    survivors
}

/// Membership counts of candidate sets across circuit reformulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardScoreboard {
    pub counts: BTreeMap<RelayId, usize>,
    pub runs: usize,
}

impl GuardScoreboard {
    /// Descending by count, ties to the smaller relay id.
    pub fn ranking(&self) -> Vec<(RelayId, usize)> {
        let mut v: Vec<(RelayId, usize)> = self.counts.iter().map(|(r, c)| (*r, *c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn top(&self) -> Option<RelayId> {
        self.ranking().first().map(|(r, _)| *r)
    }
}

/// Relays that keep showing up in the candidate set across reformulated
/// circuits are the ones every circuit shares: the guards.
pub fn identify_guard(posteriors: &[BottleneckPosterior]) -> GuardScoreboard {
    let mut counts: BTreeMap<RelayId, usize> = BTreeMap::new();
    for p in posteriors {
        for r in &p.candidate_set {
            *counts.entry(*r).or_insert(0) += 1;
        }
    }
    GuardScoreboard { counts, runs: posteriors.len() }
}

/// A fingerprint verdict paired with how often it would fire by chance if
/// the bottleneck were uniform over the rendezvous path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenServiceVerdict {
    pub verdict: FingerprintVerdict,
    pub base_rate: f64,
}

pub fn detect_hidden_service(
    target: &ThroughputTrace,
    probe: &ThroughputTrace,
    threshold: f64,
    min_window: f64,
    path_hops: usize,
) -> Result<HiddenServiceVerdict> {
    if path_hops == 0 {
        return Err(Error::Domain("rendezvous path needs at least one hop".into()));
    }
    let verdict = fingerprint_pair(target, probe, threshold, min_window)?;
    Ok(HiddenServiceVerdict { verdict, base_rate: 1.0 / path_hops as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkabilityVerdict {
    pub macro_r: f64,
    pub exclusivity: f64,
    pub r_threshold: f64,
    pub e_threshold: f64,
    pub linked: bool,
}

/// Three steps: macro correlation on 1 s buckets, the micro timescale from
/// the joint mean throughput, and mutual exclusivity at that scale. Linked
/// only when both thresholds pass; identical inputs correlate perfectly but
/// are never mutually exclusive, so they come back unlinked.
pub fn link_streams(
    x: &ThroughputTrace,
    y: &ThroughputTrace,
    r_threshold: f64,
    e_threshold: f64,
) -> Result<LinkabilityVerdict> {
    let macro_bucket = MACRO_BUCKET.max(x.interval).max(y.interval);
    let aligned = align_to(x, y, macro_bucket)?;
    let macro_r = stats::pearson(&aligned.x, &aligned.y)?;
    let joint = aligned
        .x
        .iter()
        .zip(&aligned.y)
        .map(|(a, b)| a + b)
        .sum::<f64>()
        / aligned.x.len() as f64;
    let micro = stats::micro_timescale(joint)?;
    let bucket = micro.max(x.interval).max(y.interval);
    let exclusivity = stats::mutual_exclusivity(x, y, bucket, DEFAULT_ACTIVE_THRESHOLD)?;
    Ok(LinkabilityVerdict {
        macro_r,
        exclusivity,
        r_threshold,
        e_threshold,
        linked: macro_r > r_threshold && exclusivity > e_threshold,
    })
}

/// Correlation between a victim and an attacker trace restricted to the
/// buckets where the victim actually moved data. Intermittent victims spend
/// most of the wall clock idle; the idle buckets carry no signal and would
/// only wash the coefficient out.
pub fn active_interval_correlation(
    victim: &ThroughputTrace,
    attacker: &ThroughputTrace,
    active_threshold: f64,
) -> Result<f64> {
    let aligned = align_to(victim, attacker, victim.interval.max(attacker.interval))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (v, a) in aligned.x.iter().zip(&aligned.y) {
        if *v > active_threshold {
            xs.push(*v);
            ys.push(*a);
        }
    }
    if xs.len() < 2 {
        return Err(Error::NoActivity);
    }
    stats::pearson(&xs, &ys)
}

/// One sampled threshold setting and the rates it produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub r_threshold: f64,
    pub e_threshold: f64,
    pub fpr: f64,
    pub fnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRateCurve {
    pub points: Vec<CurvePoint>,
    /// Rate where the FPR and FNR curves cross, interpolated linearly
    /// between adjacent sampled thresholds.
    pub cer: f64,
}

impl ErrorRateCurve {
    /// (FPR, TPR) per sampled threshold.
    pub fn roc_points(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.fpr, 1.0 - p.fnr)).collect()
    }
}

/// Default sweep: correlation thresholds from -1 to 1 in steps of 0.02.
pub fn correlation_grid() -> Vec<f64> {
    (0..=100).map(|i| -1.0 + i as f64 * 0.02).collect()
}

/// FPR/FNR for `(score, is_positive)` pairs over an ascending threshold
/// grid; a pair is flagged when its score strictly exceeds the threshold.
pub fn score_curve(
    scored: &[(f64, bool)],
    e_threshold: f64,
    grid: &[f64],
) -> Result<ErrorRateCurve> {
    let pos = scored.iter().filter(|(_, l)| *l).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::data("error curve needs both classes"));
    }
    let points: Vec<CurvePoint> = grid
        .iter()
        .map(|&t| {
            let fp = scored.iter().filter(|(s, l)| !*l && *s > t).count();
            let missed = scored.iter().filter(|(s, l)| *l && *s <= t).count();
            CurvePoint {
                r_threshold: t,
                e_threshold,
                fpr: fp as f64 / neg as f64,
                fnr: missed as f64 / pos as f64,
            }
        })
        .collect();
    let cer = crossover(&points);
    Ok(ErrorRateCurve { points, cer })
}

fn crossover(points: &[CurvePoint]) -> f64 {
    for w in points.windows(2) {
        let d0 = w[0].fpr - w[0].fnr;
        let d1 = w[1].fpr - w[1].fnr;
        if d0 >= 0.0 && d1 <= 0.0 {
            if d0 - d1 <= f64::EPSILON {
                return w[0].fpr.max(w[0].fnr).min(w[1].fpr.max(w[1].fnr));
            }
            let a = d0 / (d0 - d1);
            let f = w[0].fpr + a * (w[1].fpr - w[0].fpr);
            let g = w[0].fnr + a * (w[1].fnr - w[0].fnr);
            return 0.5 * (f + g);
        }
    }
    // The curves never cross inside the grid; report the equal-error
    // approximation at the closest point.
    points
        .iter()
        .min_by(|a, b| (a.fpr - a.fnr).abs().total_cmp(&(b.fpr - b.fnr).abs()))
        .map(|p| 0.5 * (p.fpr + p.fnr))
        .unwrap_or(f64::NAN)
}

/// Linkability error rates for labeled pairs truncated to each duration.
/// The exclusivity test acts as a gate: a pair that fails it (or whose
/// truncated traces are degenerate) can never be linked, at any threshold.
pub fn error_rate_curve(
    labeled: &[(ThroughputTrace, ThroughputTrace, bool)],
    durations: &[f64],
    e_threshold: f64,
) -> Result<Vec<(f64, ErrorRateCurve)>> {
    let grid = correlation_grid();
    durations
        .iter()
        .map(|&d| {
            let scored: Vec<(f64, bool)> = labeled
                .iter()
                .map(|(x, y, label)| {
                    let score = match link_streams(&x.prefix(d), &y.prefix(d), 0.0, e_threshold)
                    {
                        Ok(v) if v.exclusivity > e_threshold => v.macro_r,
                        _ => f64::NEG_INFINITY,
                    };
                    (score, *label)
                })
                .collect();
            score_curve(&scored, e_threshold, &grid).map(|c| (d, c))
        })
        .collect()
}
