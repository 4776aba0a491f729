//! Traffic sources for bulk and interactive flows, the utilization
//! classifier, and fitting of burst/gap models from observed traces.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::mux::{TrafficSource, CELL_BYTES};
use crate::trace::ThroughputTrace;
use crate::{Error, Result};

/// Granularity at which activity is observed, seconds.
pub const SUBINTERVAL: f64 = 5.0;
/// Observation horizon for classification, seconds.
pub const HORIZON: f64 = 600.0;
/// Flows that moved no more than this many bytes are too short to fit.
pub const MIN_FIT_BYTES: f64 = (10 * CELL_BYTES) as f64;

/// Empirical samples of per-flow average burst size (bytes) and average gap
/// length (seconds). Serialized as two plain JSON arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstGapModel {
    pub burst_sizes: Vec<f64>,
    pub gap_times: Vec<f64>,
}

impl BurstGapModel {
    pub fn new(burst_sizes: Vec<f64>, gap_times: Vec<f64>) -> Result<BurstGapModel> {
        let ok = |v: &[f64]| !v.is_empty() && v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !ok(&burst_sizes) || !ok(&gap_times) {
            return Err(Error::InvalidDistribution(
                "burst/gap samples must be non-empty and strictly positive".into(),
            ));
        }
        Ok(BurstGapModel { burst_sizes, gap_times })
    }

    /// Synthetic stand-in for users without a trace corpus, not fitted to
    /// any measurement: frozen draws from a log-normal burst distribution
    /// with mean 100 KB and exponential gaps with mean 8 s.
    pub fn synthetic_default() -> BurstGapModel {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5f17_7e57);
        let sigma = 0.75f64;
        let mu = (100.0f64 * 1024.0).ln() - sigma * sigma / 2.0;
        let bursts = LogNormal::new(mu, sigma).expect("valid log-normal");
        let gaps = Exp::<f64>::new(1.0 / 8.0).expect("valid exponential");
        BurstGapModel {
            burst_sizes: (0..256).map(|_| bursts.sample(&mut rng).max(1.0)).collect(),
            gap_times: (0..256).map(|_| gaps.sample(&mut rng).max(1e-3)).collect(),
        }
    }

    pub fn mean_burst(&self) -> f64 {
        self.burst_sizes.iter().sum::<f64>() / self.burst_sizes.len() as f64
    }

    pub fn mean_gap(&self) -> f64 {
        self.gap_times.iter().sum::<f64>() / self.gap_times.len() as f64
    }
}

/// How busy a flow keeps its circuit, at subinterval granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UtilizationClass {
    /// Active more than 90% of subintervals.
    Bulk,
    /// Active 50-90% of subintervals.
    Moderate,
    /// Active less than half the time.
    Low,
}

/// An always-backlogged source. Duration zero or less means no traffic at
/// all rather than an infinite backlog.
pub fn generate_bulk(duration: f64) -> TrafficSource {
    if duration > 0.0 {
        TrafficSource::Bulk
    } else {
        TrafficSource::scripted(Vec::new())
    }
}

/// Alternating burst/gap source: each burst is a uniform draw from the
/// model's burst sizes, followed by an idle gap drawn from its gap times
/// once the burst has drained. Enough pairs are drawn to cover `duration`
/// even if every burst drained instantly.
pub fn generate_interactive(
    model: &BurstGapModel,
    duration: f64,
    tick: f64,
    rng: &mut impl Rng,
) -> TrafficSource {
    if duration <= 0.0 {
        return TrafficSource::scripted(Vec::new());
    }
    let max_pairs = (duration / tick).ceil() as usize + 1;
    let mut bursts = Vec::new();
    let mut gaps = Vec::new();
    let mut covered = 0.0;
    while covered < duration && bursts.len() < max_pairs {
        let b = model.burst_sizes[rng.random_range(0..model.burst_sizes.len())];
        let g = model.gap_times[rng.random_range(0..model.gap_times.len())];
        bursts.push((b.round() as u64).max(1));
        gaps.push(((g / tick).ceil() as u64).max(1));
        covered += g;
    }
    TrafficSource::interactive(bursts, gaps)
}

/// Fraction of `subinterval`-second slots within the first `horizon` seconds
/// where any traffic was observed, and the class it implies. Boundaries are
/// assigned upward: exactly 0.5 is Moderate, exactly 0.9 is Bulk.
pub fn classify_utilization(
    trace: &ThroughputTrace,
    subinterval: f64,
    horizon: f64,
) -> Result<(UtilizationClass, f64)> {
    if !(subinterval > 0.0) || horizon < subinterval {
        return Err(Error::Domain(format!(
            "bad classifier geometry: subinterval {subinterval}, horizon {horizon}"
        )));
    }
    let slots = trace.prefix(horizon).rebucket(subinterval)?;
    if slots.is_empty() {
        return Err(Error::Degenerate("trace shorter than one subinterval".into()));
    }
    let active = slots.samples.iter().filter(|v| **v > 0.0).count();
    let fraction = active as f64 / slots.len() as f64;
    let class = if fraction >= 0.9 {
        UtilizationClass::Bulk
    } else if fraction >= 0.5 {
        UtilizationClass::Moderate
    } else {
        UtilizationClass::Low
    };
    Ok((class, fraction))
}

/// Empirical burst/gap model over the Moderate-class flows in `traces`:
/// per flow, the average bytes moved per maximal active run of subintervals
/// and the average length of idle runs strictly between bursts. Flows that
/// moved at most [`MIN_FIT_BYTES`] are discarded as too short to
/// characterize. Sample order is canonical, so the fit does not depend on
/// input order.
pub fn fit_model(traces: &[ThroughputTrace]) -> Result<BurstGapModel> {
    let mut burst_sizes = Vec::new();
    let mut gap_times = Vec::new();
    for t in traces {
        let total_bytes: f64 = t.samples.iter().sum::<f64>() * t.interval;
        if total_bytes <= MIN_FIT_BYTES {
            continue;
        }
        let Ok((class, _)) = classify_utilization(t, SUBINTERVAL, HORIZON) else {
            continue;
        };
        if class != UtilizationClass::Moderate {
            continue;
        }
        let slots = t.prefix(HORIZON).rebucket(SUBINTERVAL)?;
        let mut bursts = Vec::new();
        let mut gaps = Vec::new();
        let mut run_bytes = 0.0;
        let mut idle_len = 0usize;
        let mut seen_burst = false;
        for &s in &slots.samples {
            if s > 0.0 {
                if run_bytes == 0.0 && seen_burst && idle_len > 0 {
                    gaps.push(idle_len as f64 * SUBINTERVAL);
                }
                idle_len = 0;
                run_bytes += s * SUBINTERVAL;
            } else {
                if run_bytes > 0.0 {
                    bursts.push(run_bytes);
                    run_bytes = 0.0;
                    seen_burst = true;
                }
                idle_len += 1;
            }
        }
        if run_bytes > 0.0 {
            bursts.push(run_bytes);
        }
        if !bursts.is_empty() {
            burst_sizes.push(bursts.iter().sum::<f64>() / bursts.len() as f64);
        }
        if !gaps.is_empty() {
            gap_times.push(gaps.iter().sum::<f64>() / gaps.len() as f64);
        }
    }
    burst_sizes.sort_by(|a, b| a.total_cmp(b));
    gap_times.sort_by(|a, b| a.total_cmp(b));
    if burst_sizes.is_empty() || gap_times.is_empty() {
        return Err(Error::data("no moderate-class flows to fit"));
    }
    BurstGapModel::new(burst_sizes, gap_times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relay::{Relay, RelayId};
    use crate::sim::{Engine, SimConfig};

    fn slot_trace(values: &[f64]) -> ThroughputTrace {
        ThroughputTrace::new(0.0, SUBINTERVAL, values.to_vec()).unwrap()
    }

    #[test]
    fn classifier_thresholds_assign_boundaries_upward() {
        let all = slot_trace(&[100.0; 120]);
        assert_eq!(
            classify_utilization(&all, SUBINTERVAL, HORIZON).unwrap(),
            (UtilizationClass::Bulk, 1.0)
        );

        let mut half: Vec<f64> = vec![0.0; 120];
        for v in half.iter_mut().take(60) {
            *v = 30.0;
        }
        let (class, fraction) =
            classify_utilization(&slot_trace(&half), SUBINTERVAL, HORIZON).unwrap();
        assert_eq!(class, UtilizationClass::Moderate);
        assert!((fraction - 0.5).abs() < 1e-12);

        let mut low = vec![0.0; 120];
        low[3] = 9.0;
        assert_eq!(
            classify_utilization(&slot_trace(&low), SUBINTERVAL, HORIZON).unwrap().0,
            UtilizationClass::Low
        );
    }

    #[test]
    fn classifier_ignores_traffic_past_the_horizon() {
        // Active only in the second ten minutes: the first horizon decides.
        let mut v = vec![0.0; 240];
        for s in v.iter_mut().skip(120) {
            *s = 50.0;
        }
        let (class, fraction) =
            classify_utilization(&slot_trace(&v), SUBINTERVAL, HORIZON).unwrap();
        assert_eq!(class, UtilizationClass::Low);
        assert_eq!(fraction, 0.0);
    }

    #[test]
    fn bulk_source_classifies_bulk() {
        let relays = vec![Relay::new(RelayId(0), "r0", 40.0 * 1024.0).unwrap()];
        let mut eng = Engine::new(relays, SimConfig::default()).unwrap();
        let c = eng.add_chain_circuit(&[RelayId(0)]).unwrap();
        let s = eng.add_stream(c, generate_bulk(120.0)).unwrap();
        eng.run(120.0);
        let trace = eng.stream_trace(s, 0.0, 120.0).unwrap();
        let (class, fraction) = classify_utilization(&trace, SUBINTERVAL, 120.0).unwrap();
        assert_eq!(class, UtilizationClass::Bulk);
        assert_eq!(fraction, 1.0);
    }

    #[test]
    fn bulk_for_no_time_is_silence() {
        assert_eq!(generate_bulk(0.0), TrafficSource::scripted(Vec::new()));
    }

    #[test]
    fn interactive_is_idle_during_gaps() {
        // Point masses: 51,200-byte bursts, 5 s gaps, on a relay that drains
        // a burst in ~1 s. Activity must come in well-separated clumps.
        let model =
            BurstGapModel::new(vec![51_200.0], vec![5.0]).unwrap();
        let relays = vec![Relay::new(RelayId(0), "r0", 50.0 * 1024.0).unwrap()];
        let mut eng = Engine::new(relays, SimConfig::default()).unwrap();
        let c = eng.add_chain_circuit(&[RelayId(0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let src = generate_interactive(&model, 60.0, eng.config().tick, &mut rng);
        let s = eng.add_stream(c, src).unwrap();
        eng.run(60.0);
        let trace = eng.stream_trace(s, 0.0, 60.0).unwrap();

        let mut runs = Vec::new();
        let mut len = 0usize;
        for &v in &trace.samples {
            if v > 0.0 {
                if len > 0 {
                    runs.push(len);
                }
                len = 0;
            } else {
                len += 1;
            }
        }
        let interior: Vec<usize> = runs.into_iter().skip(1).collect();
        assert!(interior.len() >= 3, "want several gaps, got {interior:?}");
        // Every interior idle run covers the full 5 s gap (50 ticks).
        assert!(interior.iter().all(|l| *l >= 50), "gaps too short: {interior:?}");
    }

    #[test]
    fn fit_recovers_point_mass_bursts_and_is_order_invariant() {
        // 2 slots on at 30 KB/s, 2 slots off: fraction 0.5, Moderate.
        let mut v = Vec::new();
        for _ in 0..30 {
            v.extend_from_slice(&[30_720.0, 30_720.0, 0.0, 0.0]);
        }
        let a = slot_trace(&v);
        let b = slot_trace(&v[..80]);
        let model = fit_model(&[a.clone(), b.clone()]).unwrap();
        let flipped = fit_model(&[b, a]).unwrap();
        assert_eq!(model, flipped);
        // Each burst moves 2 * 5 * 30,720 bytes.
        assert!((model.mean_burst() - 307_200.0).abs() < 1e-6);
        assert!((model.mean_gap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn fit_skips_short_flows_and_errors_with_nothing_left() {
        let tiny = slot_trace(&[100.0, 0.0, 100.0, 0.0]);
        assert!(matches!(fit_model(&[tiny]), Err(Error::Data(_))));
    }

    #[test]
    fn generate_then_fit_round_trips_mean_burst() {
        // Moderate model: 307,200-byte bursts, 10 s gaps, drained at
        // 30,720 B/s so each burst occupies ~2 subintervals.
        let model = BurstGapModel::new(vec![307_200.0], vec![10.0]).unwrap();
        let relays = vec![Relay::new(RelayId(0), "r0", 30_720.0).unwrap()];
        let mut eng = Engine::new(relays, SimConfig::default()).unwrap();
        let c = eng.add_chain_circuit(&[RelayId(0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let src = generate_interactive(&model, HORIZON, eng.config().tick, &mut rng);
        let s = eng.add_stream(c, src).unwrap();
        eng.run(HORIZON);
        let trace = eng.stream_trace(s, 0.0, HORIZON).unwrap();

        let (class, _) = classify_utilization(&trace, SUBINTERVAL, HORIZON).unwrap();
        assert_eq!(class, UtilizationClass::Moderate);
        let fitted = fit_model(&[trace]).unwrap();
        let rel = (fitted.mean_burst() - model.mean_burst()).abs() / model.mean_burst();
        assert!(rel < 0.15, "mean burst drifted {:.1}%", rel * 100.0);
    }

    #[test]
    fn synthetic_default_is_valid_and_frozen() {
        let m = BurstGapModel::synthetic_default();
        BurstGapModel::new(m.burst_sizes.clone(), m.gap_times.clone()).unwrap();
        assert_eq!(m, BurstGapModel::synthetic_default());
        let rel = (m.mean_burst() - 102_400.0).abs() / 102_400.0;
        assert!(rel < 0.3, "synthetic mean burst off by {:.1}%", rel * 100.0);
        assert!(m.mean_gap() > 4.0 && m.mean_gap() < 16.0);
    }

    #[test]
    fn interactive_generation_is_seed_stable() {
        let model = BurstGapModel::synthetic_default();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = generate_interactive(&model, 300.0, 0.1, &mut r1);
        let b = generate_interactive(&model, 300.0, 0.1, &mut r2);
        assert_eq!(a, b);
    }
}
