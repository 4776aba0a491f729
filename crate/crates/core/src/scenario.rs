//! Seeded batch experiments. Each scenario kind builds a network, replays
//! its measurement procedure run by run, launches the matching attack, and
//! folds the outputs into per-run records plus a summary table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    active_interval_correlation, correlation_grid, detect_hidden_service, eliminate_by_throughput,
    fingerprint_pair, identify_guard, link_streams, posterior_from_set, score_curve, CurvePoint,
};
use crate::io::{log_uniform_capacity, synthetic_network};
use crate::mux::TrafficSource;
use crate::relay::{Relay, RelayId};
use crate::sim::{select_path, CircuitId, Engine, SimConfig, MAX_CHAIN_HOPS};
use crate::stats::{BottleneckPosterior, DEFAULT_ACTIVE_THRESHOLD};
use crate::trace::ThroughputTrace;
use crate::traffic::{generate_interactive, BurstGapModel};
use crate::{Error, Result};

/// Attacker streams begin this long after the target stream.
pub const SYNC_DELAY: f64 = 30.0;
/// Simulated seconds before the target appears. Circuit lifetimes are
/// memoryless, so the churn population is stationary from the first tick;
/// the warmup only has to cover the synchronized slow-start ramps and
/// flow-control fill of the initial population.
pub const WARMUP: f64 = 30.0;
/// Correlation attacks consume throughput series at this bucket width.
pub const SAMPLE_BUCKET: f64 = 1.0;
/// Mean-comparison granularity of the elimination attack, seconds.
pub const ELIMINATION_SUBINTERVAL: f64 = 2.0;
/// Horizon of the elimination summary statistic, seconds.
pub const ELIMINATION_HORIZON: f64 = 10.0;
/// Prefix lengths at which pairwise detection is evaluated, seconds.
pub const CHECKPOINTS: &[f64] =
    &[120.0, 180.0, 240.0, 300.0, 360.0, 420.0, 480.0, 540.0, 600.0];
/// False-positive budget the interactive ROC summary is read at.
pub const ROC_FPR_CAP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    AllCommon,
    NoneCommon,
    OneCommon,
    IdentifyBottleneck,
    GuardDiscovery,
    HiddenService,
    LinkStreams,
    InteractivePair,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 8] = [
        ScenarioKind::AllCommon,
        ScenarioKind::NoneCommon,
        ScenarioKind::OneCommon,
        ScenarioKind::IdentifyBottleneck,
        ScenarioKind::GuardDiscovery,
        ScenarioKind::HiddenService,
        ScenarioKind::LinkStreams,
        ScenarioKind::InteractivePair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::AllCommon => "all-common",
            ScenarioKind::NoneCommon => "none-common",
            ScenarioKind::OneCommon => "one-common",
            ScenarioKind::IdentifyBottleneck => "identify-bottleneck",
            ScenarioKind::GuardDiscovery => "guard-discovery",
            ScenarioKind::HiddenService => "hidden-service",
            ScenarioKind::LinkStreams => "link-streams",
            ScenarioKind::InteractivePair => "interactive-pair",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        ScenarioKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown scenario kind {s:?}")))
    }
}

/// A batch configuration. `new` fills the defaults each kind was calibrated
/// with; command-line flags override individual fields afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub runs: usize,
    /// Measured seconds per run, counted from the attacker stream start.
    pub duration: f64,
    pub seed: u64,
    pub threshold: f64,
    pub min_window: f64,
    pub exclusivity_threshold: f64,
    pub tick: f64,
    /// Relay count of the synthetic universe when no relay file is given.
    /// The hidden-service kind reads it as the rendezvous path length.
    pub universe: usize,
    /// Background churn circuits kept alive during every run.
    pub background: usize,
    /// End-to-end ack delay handed to the engine, seconds.
    pub ack_delay: f64,
    /// Circuits rebuilt through the same guard per repetition
    /// (guard discovery only).
    pub reformulations: usize,
    /// Labeled runs that calibrate the set inclusion probability
    /// (bottleneck identification only).
    pub calibration_runs: usize,
    /// Observation lengths the linkability error curve is evaluated at.
    pub durations: Vec<f64>,
    /// Burst/gap model for the victim stream (interactive pair only);
    /// defaults to the built-in synthetic model.
    pub traffic: Option<BurstGapModel>,
    /// Provenance note carried into results files when the relay set came
    /// from disk.
    pub network_file: Option<String>,
}

impl Scenario {
    pub fn new(kind: ScenarioKind) -> Scenario {
        let mut s = Scenario {
            kind,
            runs: 100,
            duration: 600.0,
            seed: 0,
            threshold: 0.5,
            min_window: 200.0,
            exclusivity_threshold: 0.5,
            tick: 0.1,
            universe: 25,
            background: 150,
            ack_delay: 0.6,
            reformulations: 50,
            calibration_runs: 50,
            durations: Vec::new(),
            traffic: None,
            network_file: None,
        };
        match kind {
            // Dense multiplexing stabilizes the pair statistic: chance
            // correlation between disjoint paths falls off as the number of
            // independent flows sharing each relay grows, while a shared
            // path correlates at any density.
            ScenarioKind::AllCommon | ScenarioKind::NoneCommon => {
                s.background = 660;
            }
            ScenarioKind::OneCommon => {
                s.duration = 300.0;
                s.threshold = 0.4;
                s.background = 50;
            }
            ScenarioKind::IdentifyBottleneck => {
                s.threshold = 0.4;
                s.min_window = 300.0;
                s.background = 50;
            }
            ScenarioKind::GuardDiscovery => {
                s.runs = 20;
                s.duration = 300.0;
                s.threshold = 0.4;
                s.background = 50;
            }
            ScenarioKind::HiddenService => {
                s.threshold = 0.4;
                s.min_window = 300.0;
                s.universe = 8;
                s.background = 16;
            }
            ScenarioKind::LinkStreams => {
                s.runs = 450;
                s.duration = 300.0;
                s.threshold = 0.4;
                s.universe = 8;
                s.background = 16;
                s.ack_delay = 2.0;
                s.durations = vec![120.0, 300.0];
            }
            ScenarioKind::InteractivePair => {}
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("runs must be at least 1"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::config(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if !(self.tick > 0.0 && self.tick.is_finite()) {
            return Err(Error::config(format!("tick must be positive, got {}", self.tick)));
        }
        let windowed = matches!(
            self.kind,
            ScenarioKind::AllCommon
                | ScenarioKind::NoneCommon
                | ScenarioKind::OneCommon
                | ScenarioKind::IdentifyBottleneck
                | ScenarioKind::GuardDiscovery
                | ScenarioKind::HiddenService
        );
        if windowed && self.duration + 1e-9 < self.min_window {
            return Err(Error::config(format!(
                "duration {} s is shorter than the correlation window {} s",
                self.duration, self.min_window
            )));
        }
        match self.kind {
            ScenarioKind::GuardDiscovery if self.reformulations == 0 => {
                Err(Error::config("guard discovery needs at least one reformulation"))
            }
            ScenarioKind::IdentifyBottleneck if self.calibration_runs == 0 => {
                Err(Error::config("bottleneck identification needs calibration runs"))
            }
            ScenarioKind::HiddenService if !(2..=MAX_CHAIN_HOPS).contains(&self.universe) => {
                Err(Error::config(format!(
                    "rendezvous path length must lie in 2..={MAX_CHAIN_HOPS}, got {}",
                    self.universe
                )))
            }
            ScenarioKind::LinkStreams => {
                if self.durations.is_empty() {
                    return Err(Error::config("link-streams needs at least one duration"));
                }
                for &d in &self.durations {
                    if !(d > 0.0) || d > self.duration + 1e-9 {
                        return Err(Error::config(format!(
                            "curve duration {d} s outside (0, {}]",
                            self.duration
                        )));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// One run's persisted row. `traces` names the series written under
/// `traces/` in the batch directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    pub run_index: usize,
    pub seed: u64,
    pub truth: String,
    pub verdict: String,
    pub score: f64,
    pub detail: String,
    pub traces: Vec<String>,
    pub wall_ms: u64,
}

/// A cumulative-curve sample: the fraction of runs at or beyond `value`,
/// with the direction fixed by the summary that owns it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub value: f64,
    pub fraction: f64,
}

/// Detection rates at one prefix length, swept over the threshold grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub at: f64,
    pub detection_fraction: f64,
    pub errors: usize,
    /// fraction of runs with correlation strictly above each threshold
    pub cdf: Vec<CdfPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub runs: usize,
    pub duration: f64,
    pub threshold: f64,
    pub min_window: f64,
    pub checkpoints: Vec<CheckpointSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BottleneckSummary {
    pub runs: usize,
    pub duration: f64,
    pub threshold: f64,
    pub min_window: f64,
    pub universe: usize,
    pub prior_bits: f64,
    pub calibration_runs: usize,
    /// Fraction of calibration runs whose true bottleneck landed in the
    /// candidate set; reused as the inclusion probability of the posterior.
    pub inclusion_probability: f64,
    pub median_entropy_bits: f64,
    pub mean_entropy_bits: f64,
    /// fraction of runs with posterior entropy at or below each value
    pub entropy_cdf: Vec<CdfPoint>,
    pub truth_in_set_fraction: f64,
    pub mean_entropy_drop_10s: f64,
    pub mean_survivors_10s: f64,
    pub errors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuardSummary {
    pub repetitions: usize,
    pub reformulations: usize,
    pub duration: f64,
    pub threshold: f64,
    pub min_window: f64,
    pub top_ranked_fraction: f64,
    /// Guard's candidate-set membership rate, averaged over repetitions.
    pub mean_guard_hit_rate: f64,
    /// Candidate-set membership counts summed over all repetitions.
    pub aggregate_counts: BTreeMap<u32, usize>,
    pub errors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HiddenServiceSummary {
    pub runs: usize,
    pub duration: f64,
    pub threshold: f64,
    pub min_window: f64,
    pub path_hops: usize,
    pub base_rate: f64,
    pub detection_fraction: f64,
    /// How often the probed node really was the bottleneck.
    pub bottleneck_hit_fraction: f64,
    pub errors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DurationCurve {
    pub duration: f64,
    pub cer: f64,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkabilitySummary {
    pub runs: usize,
    pub positives: usize,
    pub negatives: usize,
    pub exclusivity_threshold: f64,
    pub curves: Vec<DurationCurve>,
    pub errors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocSummary {
    pub runs: usize,
    pub positives: usize,
    pub negatives: usize,
    pub duration: f64,
    pub fpr_cap: f64,
    pub tpr_at_fpr_cap: f64,
    pub fpr_achieved: f64,
    pub threshold_at_cap: f64,
    pub points: Vec<CurvePoint>,
    pub errors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Summary {
    Detection(DetectionSummary),
    Bottleneck(BottleneckSummary),
    Guard(GuardSummary),
    HiddenService(HiddenServiceSummary),
    Linkability(LinkabilitySummary),
    InteractiveRoc(RocSummary),
}

pub struct BatchResult {
    pub scenario: Scenario,
    pub records: Vec<RunRecord>,
    pub summary: Summary,
    /// Series the records reference: (name, 1 s buckets), extension added
    /// at write time.
    pub traces: Vec<(String, ThroughputTrace)>,
}

pub fn run_scenario(s: &Scenario, network: Option<&[Relay]>) -> Result<BatchResult> {
    s.validate()?;
    match s.kind {
        ScenarioKind::AllCommon => run_pairwise(s, network, PairKind::Same),
        ScenarioKind::NoneCommon => run_pairwise(s, network, PairKind::Disjoint),
        ScenarioKind::OneCommon => run_one_common(s, network),
        ScenarioKind::IdentifyBottleneck => run_identify_bottleneck(s, network),
        ScenarioKind::GuardDiscovery => run_guard_discovery(s, network),
        ScenarioKind::HiddenService => run_hidden_service(s, network),
        ScenarioKind::LinkStreams => run_link_streams(s, network),
        ScenarioKind::InteractivePair => run_interactive(s, network),
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_NETWORK: u64 = 1;
const SALT_RUN: u64 = 2;
const SALT_CALIBRATION: u64 = 3;
const SALT_PATH: u64 = 4;
const SALT_TRAFFIC: u64 = 5;
const SALT_GUARD: u64 = 6;

/// Per-run seeds: independent streams per (batch seed, role, index).
fn derive_seed(batch: u64, salt: u64, index: u64) -> u64 {
    splitmix64(splitmix64(batch ^ salt.wrapping_mul(0xA076_1D64_78BD_642F)) ^ index)
}

fn base_config(s: &Scenario, seed: u64) -> SimConfig {
    SimConfig {
        tick: s.tick,
        seed,
        background_circuits: s.background,
        ack_delay: s.ack_delay,
        ..SimConfig::default()
    }
}

/// Default fabric for the flow-pair batches: every relay is busy enough
/// that a path's throughput tracks its bottleneck share instead of its
/// flow-control window. Capacities sit in a narrow band so that, at the
/// default circuit density, no share collapses to cell granularity and
/// none escapes into the window-limited (flat) regime.
fn contended_network(n: usize, seed: u64) -> Result<Vec<Relay>> {
    if n < 3 {
        return Err(Error::config(format!("a network needs at least 3 relays, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (n - 1).to_string().len().max(2);
    (0..n)
        .map(|i| {
            let capacity = log_uniform_capacity(&mut rng, 1.0e6, 8.0e6);
            Ok(Relay::new(RelayId(i as u32), format!("relay-{i:0width$}"), capacity)?
                .with_flags(true, true))
        })
        .collect()
}

fn resolve_network(s: &Scenario, network: Option<&[Relay]>) -> Result<Vec<Relay>> {
    let net_seed = derive_seed(s.seed, SALT_NETWORK, 0);
    let relays = match network {
        Some(r) => r.to_vec(),
        None => match s.kind {
            ScenarioKind::AllCommon | ScenarioKind::NoneCommon => {
                contended_network(s.universe, net_seed)?
            }
            _ => synthetic_network(s.universe, net_seed)?,
        },
    };
    if relays.len() < 3 {
        return Err(Error::config("a path needs at least 3 relays"));
    }
    if !relays.iter().any(|r| r.guard_eligible) {
        return Err(Error::config("no guard-eligible relay in the network"));
    }
    if !relays.iter().any(|r| r.exit_eligible) {
        return Err(Error::config("no exit-eligible relay in the network"));
    }
    Ok(relays)
}

fn relay_map(relays: &[Relay]) -> BTreeMap<RelayId, Relay> {
    relays.iter().map(|r| (r.id, r.clone())).collect()
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Shortest exact decimal form, so values parsed back from records
/// reproduce the in-memory floats bit for bit.
fn fmt_r(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

/// Checkpoints the pairwise kinds evaluate: the fixed grid clipped to
/// [min_window, duration), plus the full duration itself.
fn checkpoint_list(s: &Scenario) -> Vec<f64> {
    let mut v: Vec<f64> = CHECKPOINTS
        .iter()
        .copied()
        .filter(|&c| c + 1e-9 >= s.min_window && c < s.duration - 1e-9)
        .collect();
    v.push(s.duration);
    v
}

#[derive(Clone, Copy, PartialEq)]
enum PairKind {
    Same,
    Disjoint,
}

/// Shared chassis of the pairwise scenarios: a client circuit carrying the
/// victim stream, then an attacker chain circuit over the same or a
/// disjoint path after the synchronization delay. Returns both series from
/// the attacker's start, in 1 s buckets.
fn pair_run(
    s: &Scenario,
    relays: &[Relay],
    idx: usize,
    kind: PairKind,
    victim_source: TrafficSource,
) -> Result<(ThroughputTrace, ThroughputTrace)> {
    let seed = derive_seed(s.seed, SALT_RUN, idx as u64);
    let mut eng = Engine::new(relays.to_vec(), base_config(s, seed))?;
    eng.run(WARMUP);
    let client = eng.new_client()?;
    let victim = eng.add_client_circuit(client)?;
    let path = eng.circuit(victim).expect("circuit just created").path;
    eng.add_stream(victim, victim_source)?;
    eng.run(SYNC_DELAY);
    let attacker_path: Vec<RelayId> = match kind {
        PairKind::Same => path,
        PairKind::Disjoint => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(s.seed, SALT_PATH, idx as u64));
            disjoint_path(eng.relays(), &path, &mut rng)?.to_vec()
        }
    };
    let attacker = eng.add_chain_circuit(&attacker_path)?;
    eng.add_stream(attacker, TrafficSource::Bulk)?;
    // Discard the attacker's ramp-up before correlating: its monotone climb
    // is a spurious trend in the probe series, not congestion signal.
    eng.run(eng.config().slow_start_ramp);
    let probe_start = eng.clock();
    eng.run(s.duration);
    let end = probe_start + s.duration;
    let v = eng.circuit_trace(victim, probe_start, end)?.rebucket(SAMPLE_BUCKET)?;
    let a = eng.circuit_trace(attacker, probe_start, end)?.rebucket(SAMPLE_BUCKET)?;
    Ok((v, a))
}

/// A normally-weighted path over the relays not on the victim's circuit.
fn disjoint_path(
    relays: &BTreeMap<RelayId, Relay>,
    exclude: &[RelayId],
    rng: &mut ChaCha8Rng,
) -> Result<[RelayId; 3]> {
    let rest: BTreeMap<RelayId, Relay> = relays
        .iter()
        .filter(|(id, _)| !exclude.contains(id))
        .map(|(id, r)| (*id, r.clone()))
        .collect();
    let guards: Vec<RelayId> =
        rest.values().filter(|r| r.guard_eligible).map(|r| r.id).collect();
    if guards.is_empty() {
        return Err(Error::config("no guard-eligible relay outside the victim path"));
    }
    let g = guards[rng.random_range(0..guards.len())];
    select_path(&rest, &[g], rng)
}

/// Correlations at every checkpoint; statistical failures (flat series,
/// short overlap) score NaN, which never exceeds a threshold.
///
/// With `full_interval` the coefficient spans the whole prefix, the plain
/// pair statistic. Without it the score is the maximum over windows of at
/// least `min_window`, which tracks a relay that binds both circuits only
/// part of the time but inflates chance correlation and so stays reserved
/// for the scenarios that need it.
fn checkpoint_correlations(
    s: &Scenario,
    checkpoints: &[f64],
    victim: &ThroughputTrace,
    attacker: &ThroughputTrace,
    full_interval: bool,
) -> Vec<f64> {
    checkpoints
        .iter()
        .map(|&c| {
            let window = if full_interval { c } else { s.min_window.min(c) };
            match fingerprint_pair(&victim.prefix(c), &attacker.prefix(c), s.threshold, window) {
                Ok(fp) => fp.r_max,
                Err(_) => f64::NAN,
            }
        })
        .collect()
}

fn detection_summary(
    s: &Scenario,
    checkpoints: &[f64],
    per_run: &[Vec<f64>],
) -> DetectionSummary {
    let grid = correlation_grid();
    let summaries = checkpoints
        .iter()
        .enumerate()
        .map(|(j, &at)| {
            let values: Vec<f64> = per_run.iter().map(|rs| rs[j]).collect();
            let errors = values.iter().filter(|v| v.is_nan()).count();
            let frac_above = |t: f64| {
                values.iter().filter(|&&v| v > t).count() as f64 / values.len() as f64
            };
            CheckpointSummary {
                at,
                detection_fraction: frac_above(s.threshold),
                errors,
                cdf: grid
                    .iter()
                    .map(|&t| CdfPoint { value: t, fraction: frac_above(t) })
                    .collect(),
            }
        })
        .collect();
    DetectionSummary {
        runs: s.runs,
        duration: s.duration,
        threshold: s.threshold,
        min_window: s.min_window,
        checkpoints: summaries,
    }
}

struct RunOutcome {
    record: RunRecord,
    traces: Vec<(String, ThroughputTrace)>,
    scores: Vec<f64>,
}

fn detection_record(
    s: &Scenario,
    idx: usize,
    truth: &str,
    checkpoints: &[f64],
    rs: &[f64],
    wall_ms: u64,
) -> RunRecord {
    let last = *rs.last().expect("at least one checkpoint");
    let verdict = if last.is_nan() {
        "error"
    } else if last > s.threshold {
        "shared"
    } else {
        "distinct"
    };
    let detail = checkpoints
        .iter()
        .zip(rs)
        .map(|(c, r)| format!("r{}={}", *c as u64, fmt_r(*r)))
        .collect::<Vec<_>>()
        .join(";");
    RunRecord {
        scenario: s.kind.name().into(),
        run_index: idx,
        seed: derive_seed(s.seed, SALT_RUN, idx as u64),
        truth: truth.into(),
        verdict: verdict.into(),
        score: last,
        detail,
        traces: vec![
            format!("traces/run_{idx:04}_victim.csv"),
            format!("traces/run_{idx:04}_attacker.csv"),
        ],
        wall_ms,
    }
}

fn collect_outcomes(outcomes: Vec<RunOutcome>) -> (Vec<RunRecord>, Vec<(String, ThroughputTrace)>, Vec<Vec<f64>>) {
    let mut records = Vec::with_capacity(outcomes.len());
    let mut traces = Vec::new();
    let mut scores = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        records.push(o.record);
        traces.extend(o.traces);
        scores.push(o.scores);
    }
    (records, traces, scores)
}

fn run_pairwise(s: &Scenario, network: Option<&[Relay]>, kind: PairKind) -> Result<BatchResult> {
    let relays = resolve_network(s, network)?;
    let checkpoints = checkpoint_list(s);
    let truth = match kind {
        PairKind::Same => "shared",
        PairKind::Disjoint => "distinct",
    };
    let outcomes: Vec<RunOutcome> = (0..s.runs)
        .into_par_iter()
        .map(|idx| {
            let t0 = Instant::now();
            let (v, a) = pair_run(s, &relays, idx, kind, TrafficSource::Bulk)?;
            let rs = checkpoint_correlations(s, &checkpoints, &v, &a, true);
            let record =
                detection_record(s, idx, truth, &checkpoints, &rs, t0.elapsed().as_millis() as u64);
            Ok(RunOutcome {
                record,
                traces: vec![
                    (format!("run_{idx:04}_victim"), v),
                    (format!("run_{idx:04}_attacker"), a),
                ],
                scores: rs,
            })
        })
        .collect::<Result<_>>()?;
    let (records, traces, scores) = collect_outcomes(outcomes);
    let summary = Summary::Detection(detection_summary(s, &checkpoints, &scores));
    Ok(BatchResult { scenario: s.clone(), records, summary, traces })
}

/// Both circuits pass through one shared relay, picked as the weakest in
/// the pool so it binds both rates; the other four relays are distinct.
fn run_one_common(s: &Scenario, network: Option<&[Relay]>) -> Result<BatchResult> {
    let relays = resolve_network(s, network)?;
    if relays.len() < 5 {
        return Err(Error::config("one-common needs at least 5 relays"));
    }
    let shared = relays
        .iter()
        .min_by(|a, b| a.capacity.total_cmp(&b.capacity).then(a.id.0.cmp(&b.id.0)))
        .expect("non-empty network")
        .id;
    let checkpoints = checkpoint_list(s);
    let map = relay_map(&relays);
    let outcomes: Vec<RunOutcome> = (0..s.runs)
        .into_par_iter()
        .map(|idx| {
            let t0 = Instant::now();
            let seed = derive_seed(s.seed, SALT_RUN, idx as u64);
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(s.seed, SALT_PATH, idx as u64));
            let victim_path = middle_pinned_path(&map, shared, &[], &mut rng)?;
            let attacker_path = middle_pinned_path(&map, shared, &victim_path, &mut rng)?;
            let mut eng = Engine::new(relays.clone(), base_config(s, seed))?;
            eng.run(WARMUP);
            let victim = eng.add_chain_circuit(&victim_path)?;
            eng.add_stream(victim, TrafficSource::Bulk)?;
            eng.run(SYNC_DELAY);
            let attacker = eng.add_chain_circuit(&attacker_path)?;
            eng.add_stream(attacker, TrafficSource::Bulk)?;
            // Skip the attacker's ramp-up, as in the pairwise chassis.
            eng.run(eng.config().slow_start_ramp);
            let probe_start = eng.clock();
            eng.run(s.duration);
            let end = probe_start + s.duration;
            let v = eng.circuit_trace(victim, probe_start, end)?.rebucket(SAMPLE_BUCKET)?;
            let a = eng.circuit_trace(attacker, probe_start, end)?.rebucket(SAMPLE_BUCKET)?;
            let rs = checkpoint_correlations(s, &checkpoints, &v, &a, false);
            let record = detection_record(
                s,
                idx,
                "shared",
                &checkpoints,
                &rs,
                t0.elapsed().as_millis() as u64,
            );
            Ok(RunOutcome {
                record,
                traces: vec![
                    (format!("run_{idx:04}_victim"), v),
                    (format!("run_{idx:04}_attacker"), a),
                ],
                scores: rs,
            })
        })
        .collect::<Result<_>>()?;
    let (records, traces, scores) = collect_outcomes(outcomes);
    let summary = Summary::Detection(detection_summary(s, &checkpoints, &scores));
    Ok(BatchResult { scenario: s.clone(), records, summary, traces })
}

/// Guard and exit drawn as usual but the middle pinned to `middle`;
/// `exclude` keeps the second path disjoint from the first elsewhere.
fn middle_pinned_path(
    relays: &BTreeMap<RelayId, Relay>,
    middle: RelayId,
    exclude: &[RelayId],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RelayId>> {
    let free: Vec<&Relay> = relays
        .values()
        .filter(|r| r.id != middle && !exclude.contains(&r.id))
        .collect();
    let guards: Vec<RelayId> =
        free.iter().filter(|r| r.guard_eligible).map(|r| r.id).collect();
    if guards.is_empty() {
        return Err(Error::config("no guard-eligible relay left for a pinned path"));
    }
    let guard = guards[rng.random_range(0..guards.len())];
    let exit = capacity_weighted_pick(
        free.iter().filter(|r| r.exit_eligible && r.id != guard).copied(),
        rng,
    )?;
    Ok(vec![guard, middle, exit])
}

fn capacity_weighted_pick<'a>(
    candidates: impl Iterator<Item = &'a Relay>,
    rng: &mut ChaCha8Rng,
) -> Result<RelayId> {
    let cands: Vec<&Relay> = candidates.collect();
    if cands.is_empty() {
        return Err(Error::config("no eligible relay left to pick from"));
    }
    let total: f64 = cands.iter().map(|r| r.capacity).sum();
    let mut x = rng.random_range(0.0..total);
    for r in &cands {
        x -= r.capacity;
        if x <= 0.0 {
            return Ok(r.id);
        }
    }
    Ok(cands.last().expect("non-empty").id)
}

enum TargetSpec<'a> {
    ClientCircuit,
    Chain(&'a [RelayId]),
}

struct SweepData {
    set: BTreeSet<RelayId>,
    truth: Option<RelayId>,
    survivors_10s: usize,
    target_1s: ThroughputTrace,
    probe_errors: usize,
}

/// One run of the probe-everything procedure: a target circuit, then a
/// one-hop probe per relay after the synchronization delay. Produces the
/// correlated candidate set, elimination survivors over the first seconds
/// after the probe ramp, and the target's true majority bottleneck.
fn probe_sweep(s: &Scenario, relays: &[Relay], seed: u64, target: TargetSpec) -> Result<SweepData> {
    let mut eng = Engine::new(relays.to_vec(), base_config(s, seed))?;
    eng.run(WARMUP);
    let target_circuit = match target {
        TargetSpec::ClientCircuit => {
            let client = eng.new_client()?;
            eng.add_client_circuit(client)?
        }
        TargetSpec::Chain(path) => eng.add_chain_circuit(path)?,
    };
    eng.add_stream(target_circuit, TrafficSource::Bulk)?;
    eng.run(SYNC_DELAY);
    let mut probes: BTreeMap<RelayId, CircuitId> = BTreeMap::new();
    for r in relays {
        let c = eng.add_probe_circuit(r.id)?;
        eng.add_stream(c, TrafficSource::Bulk)?;
        probes.insert(r.id, c);
    }
    let probe_start = eng.clock();
    eng.run(s.duration);
    let end = probe_start + s.duration;
    let target_1s =
        eng.circuit_trace(target_circuit, probe_start, end)?.rebucket(SAMPLE_BUCKET)?;
    let mut set = BTreeSet::new();
    let mut probe_errors = 0;
    for (rid, cid) in &probes {
        let p = eng.circuit_trace(*cid, probe_start, end)?.rebucket(SAMPLE_BUCKET)?;
        match fingerprint_pair(&target_1s, &p, s.threshold, s.min_window) {
            Ok(fp) if fp.shared => {
                set.insert(*rid);
            }
            Ok(_) => {}
            // A flat probe series carries no correlation signal.
            Err(_) => probe_errors += 1,
        }
    }
    // The elimination clock starts once the probe ramp is over, mirroring
    // the convention of discarding a probe's slow-start seconds.
    let es = probe_start + eng.config().slow_start_ramp;
    let target_el = eng.circuit_trace(target_circuit, es, es + ELIMINATION_HORIZON)?;
    let probes_el: BTreeMap<RelayId, ThroughputTrace> = probes
        .iter()
        .map(|(rid, cid)| Ok((*rid, eng.circuit_trace(*cid, es, es + ELIMINATION_HORIZON)?)))
        .collect::<Result<_>>()?;
    let survivors_10s =
        eliminate_by_throughput(&target_el, &probes_el, ELIMINATION_HORIZON, ELIMINATION_SUBINTERVAL)
            .len();
    let truth = eng.bottleneck_majority(target_circuit, probe_start, end);
    Ok(SweepData { set, truth, survivors_10s, target_1s, probe_errors })
}

fn run_identify_bottleneck(s: &Scenario, network: Option<&[Relay]>) -> Result<BatchResult> {
    let relays = resolve_network(s, network)?;
    let universe = relays.len();
    let prior_bits = (universe as f64).log2();

    // Calibration pass: how often the true bottleneck lands in the set.
    let calibration: Vec<SweepData> = (0..s.calibration_runs)
        .into_par_iter()
        .map(|i| {
            probe_sweep(
                s,
                &relays,
                derive_seed(s.seed, SALT_CALIBRATION, i as u64),
                TargetSpec::ClientCircuit,
            )
        })
        .collect::<Result<_>>()?;
    let labeled = calibration.iter().filter(|c| c.truth.is_some()).count();
    if labeled == 0 {
        return Err(Error::data("calibration produced no labeled runs"));
    }
    let hits = calibration
        .iter()
        .filter(|c| c.truth.is_some_and(|t| c.set.contains(&t)))
        .count();
    let inclusion_probability = hits as f64 / labeled as f64;

    struct BotOutcome {
        record: RunRecord,
        trace: (String, ThroughputTrace),
        entropy: f64,
        drop: f64,
        survivors: usize,
        truth_in_set: Option<bool>,
        errors: usize,
    }
    let outcomes: Vec<BotOutcome> = (0..s.runs)
        .into_par_iter()
        .map(|idx| {
            let t0 = Instant::now();
            let seed = derive_seed(s.seed, SALT_RUN, idx as u64);
            let d = probe_sweep(s, &relays, seed, TargetSpec::ClientCircuit)?;
            let posterior =
                posterior_from_set(d.set.clone(), universe, inclusion_probability)?;
            let drop =
                1.0 - ((d.survivors_10s.max(1)) as f64).log2() / prior_bits;
            let truth_in_set = d.truth.map(|t| d.set.contains(&t));
            let verdict = if d.set.is_empty() {
                "-".to_string()
            } else {
                d.set.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("|")
            };
            let record = RunRecord {
                scenario: s.kind.name().into(),
                run_index: idx,
                seed,
                truth: d.truth.map_or_else(|| "unresolved".into(), |t| t.to_string()),
                verdict,
                score: posterior.entropy_bits,
                detail: format!(
                    "set_size={};truth_in_set={};survivors_10s={};entropy_drop_10s={};probe_errors={}",
                    d.set.len(),
                    truth_in_set.map_or("unknown".into(), |b| b.to_string()),
                    d.survivors_10s,
                    fmt_r(drop),
                    d.probe_errors
                ),
                traces: vec![format!("traces/run_{idx:04}_target.csv")],
                wall_ms: t0.elapsed().as_millis() as u64,
            };
            Ok(BotOutcome {
                record,
                trace: (format!("run_{idx:04}_target"), d.target_1s),
                entropy: posterior.entropy_bits,
                drop,
                survivors: d.survivors_10s,
                truth_in_set,
                errors: d.probe_errors,
            })
        })
        .collect::<Result<_>>()?;

    let mut entropies: Vec<f64> = outcomes.iter().map(|o| o.entropy).collect();
    entropies.sort_by(f64::total_cmp);
    let n = entropies.len() as f64;
    let entropy_cdf = entropies
        .iter()
        .enumerate()
        .map(|(i, &e)| CdfPoint { value: e, fraction: (i + 1) as f64 / n })
        .collect();
    let judged: Vec<bool> = outcomes.iter().filter_map(|o| o.truth_in_set).collect();
    let summary = Summary::Bottleneck(BottleneckSummary {
        runs: s.runs,
        duration: s.duration,
        threshold: s.threshold,
        min_window: s.min_window,
        universe,
        prior_bits,
        calibration_runs: s.calibration_runs,
        inclusion_probability,
        median_entropy_bits: median_of_sorted(&entropies),
        mean_entropy_bits: mean(&entropies),
        entropy_cdf,
        truth_in_set_fraction: if judged.is_empty() {
            f64::NAN
        } else {
            judged.iter().filter(|&&b| b).count() as f64 / judged.len() as f64
        },
        mean_entropy_drop_10s: mean(&outcomes.iter().map(|o| o.drop).collect::<Vec<_>>()),
        mean_survivors_10s: mean(
            &outcomes.iter().map(|o| o.survivors as f64).collect::<Vec<_>>(),
        ),
        errors: outcomes.iter().map(|o| o.errors).sum(),
    });
    let mut records = Vec::with_capacity(outcomes.len());
    let mut traces = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        records.push(o.record);
        traces.push(o.trace);
    }
    Ok(BatchResult { scenario: s.clone(), records, summary, traces })
}

fn run_guard_discovery(s: &Scenario, network: Option<&[Relay]>) -> Result<BatchResult> {
    let relays = resolve_network(s, network)?;
    let map = relay_map(&relays);
    let universe = relays.len();

    struct RepOutcome {
        record: RunRecord,
        counts: BTreeMap<RelayId, usize>,
        top_hit: bool,
        guard_rate: f64,
        errors: usize,
    }
    let outcomes: Vec<RepOutcome> = (0..s.runs)
        .into_par_iter()
        .map(|rep| {
            let t0 = Instant::now();
            let mut guard_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(s.seed, SALT_GUARD, rep as u64));
            let guards: Vec<RelayId> =
                relays.iter().filter(|r| r.guard_eligible).map(|r| r.id).collect();
            let guard = guards[guard_rng.random_range(0..guards.len())];
            let mut posteriors: Vec<BottleneckPosterior> = Vec::with_capacity(s.reformulations);
            let mut errors = 0;
            for f in 0..s.reformulations {
                let run_idx = (rep * s.reformulations + f) as u64;
                let mut path_rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(s.seed, SALT_PATH, run_idx));
                let path = select_path(&map, &[guard], &mut path_rng)?;
                let d = probe_sweep(
                    s,
                    &relays,
                    derive_seed(s.seed, SALT_RUN, run_idx),
                    TargetSpec::Chain(&path),
                )?;
                errors += d.probe_errors;
                // Inclusion probability is irrelevant to set membership
                // counting; 0.9 keeps the posterior constructor happy.
                posteriors.push(posterior_from_set(d.set, universe, 0.9)?);
            }
            let board = identify_guard(&posteriors);
            let ranking = board.ranking();
            let top = board.top();
            let rank = ranking.iter().position(|(r, _)| *r == guard);
            let guard_count = board.counts.get(&guard).copied().unwrap_or(0);
            let guard_rate = guard_count as f64 / s.reformulations as f64;
            let top_hit = top == Some(guard);
            let counts_field = board
                .counts
                .iter()
                .map(|(r, c)| format!("{r}:{c}"))
                .collect::<Vec<_>>()
                .join("|");
            let record = RunRecord {
                scenario: s.kind.name().into(),
                run_index: rep,
                seed: derive_seed(s.seed, SALT_GUARD, rep as u64),
                truth: guard.to_string(),
                verdict: top.map_or_else(|| "-".into(), |r| r.to_string()),
                score: guard_rate,
                detail: format!(
                    "rank={};guard_count={};reformulations={};probe_errors={};counts={}",
                    rank.map_or("unranked".into(), |r| r.to_string()),
                    guard_count,
                    s.reformulations,
                    errors,
                    counts_field
                ),
                traces: Vec::new(),
                wall_ms: t0.elapsed().as_millis() as u64,
            };
            Ok(RepOutcome { record, counts: board.counts, top_hit, guard_rate, errors })
        })
        .collect::<Result<_>>()?;

    let mut aggregate: BTreeMap<u32, usize> = BTreeMap::new();
    for o in &outcomes {
        for (r, c) in &o.counts {
            *aggregate.entry(r.0).or_insert(0) += c;
        }
    }
    let summary = Summary::Guard(GuardSummary {
        repetitions: s.runs,
        reformulations: s.reformulations,
        duration: s.duration,
        threshold: s.threshold,
        min_window: s.min_window,
        top_ranked_fraction: outcomes.iter().filter(|o| o.top_hit).count() as f64
            / outcomes.len() as f64,
        mean_guard_hit_rate: mean(&outcomes.iter().map(|o| o.guard_rate).collect::<Vec<_>>()),
        aggregate_counts: aggregate,
        errors: outcomes.iter().map(|o| o.errors).sum(),
    });
    let records = outcomes.into_iter().map(|o| o.record).collect();
    Ok(BatchResult { scenario: s.clone(), records, summary, traces: Vec::new() })
}

fn run_hidden_service(s: &Scenario, network: Option<&[Relay]>) -> Result<BatchResult> {
    if network.is_some() {
        return Err(Error::config(
            "hidden-service batches draw a fresh rendezvous path per run; relay files are not accepted",
        ));
    }
    let hops = s.universe;

    struct HsOutcome {
        record: RunRecord,
        traces: Vec<(String, ThroughputTrace)>,
        detected: bool,
        truth: bool,
        errored: bool,
    }
    let outcomes: Vec<HsOutcome> = (0..s.runs)
        .into_par_iter()
        .map(|idx| {
            let t0 = Instant::now();
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(s.seed, SALT_NETWORK, idx as u64));
            // Exchangeable capacities: the probed node (the operator's own,
            // index 0) is the bottleneck with probability 1/hops.
            let relays: Vec<Relay> = (0..hops)
                .map(|i| {
                    let cap = log_uniform_capacity(&mut rng, 5.0e4, 2.0e6);
                    Ok(Relay::new(RelayId(i as u32), format!("node-{i}"), cap)?
                        .with_flags(true, true))
                })
                .collect::<Result<_>>()?;
            let seed = derive_seed(s.seed, SALT_RUN, idx as u64);
            let mut eng = Engine::new(relays.clone(), base_config(s, seed))?;
            eng.run(WARMUP);
            let mut order: Vec<RelayId> = relays.iter().map(|r| r.id).collect();
            order.shuffle(&mut rng);
            let target = eng.add_chain_circuit(&order)?;
            eng.add_stream(target, TrafficSource::Bulk)?;
            eng.run(SYNC_DELAY);
            let probe = eng.add_probe_circuit(RelayId(0))?;
            eng.add_stream(probe, TrafficSource::Bulk)?;
            let probe_start = eng.clock();
            eng.run(s.duration);
            let end = probe_start + s.duration;
            let t = eng.circuit_trace(target, probe_start, end)?.rebucket(SAMPLE_BUCKET)?;
            let p = eng.circuit_trace(probe, probe_start, end)?.rebucket(SAMPLE_BUCKET)?;
            let (r, detected, errored) =
                match detect_hidden_service(&t, &p, s.threshold, s.min_window, hops) {
                    Ok(v) => (v.verdict.r_max, v.verdict.shared, false),
                    Err(_) => (f64::NAN, false, true),
                };
            let truth =
                eng.bottleneck_majority(target, probe_start, end) == Some(RelayId(0));
            let record = RunRecord {
                scenario: s.kind.name().into(),
                run_index: idx,
                seed,
                truth: if truth { "bottleneck".into() } else { "not-bottleneck".into() },
                verdict: if errored {
                    "error".into()
                } else if detected {
                    "detected".into()
                } else {
                    "undetected".into()
                },
                score: r,
                detail: format!("r_max={};hops={hops}", fmt_r(r)),
                traces: vec![
                    format!("traces/run_{idx:04}_target.csv"),
                    format!("traces/run_{idx:04}_probe.csv"),
                ],
                wall_ms: t0.elapsed().as_millis() as u64,
            };
            Ok(HsOutcome {
                record,
                traces: vec![
                    (format!("run_{idx:04}_target"), t),
                    (format!("run_{idx:04}_probe"), p),
                ],
                detected,
                truth,
                errored,
            })
        })
        .collect::<Result<_>>()?;

    let n = outcomes.len() as f64;
    let summary = Summary::HiddenService(HiddenServiceSummary {
        runs: s.runs,
        duration: s.duration,
        threshold: s.threshold,
        min_window: s.min_window,
        path_hops: hops,
        base_rate: 1.0 / hops as f64,
        detection_fraction: outcomes.iter().filter(|o| o.detected).count() as f64 / n,
        bottleneck_hit_fraction: outcomes.iter().filter(|o| o.truth).count() as f64 / n,
        errors: outcomes.iter().filter(|o| o.errored).count(),
    });
    let mut records = Vec::with_capacity(outcomes.len());
    let mut traces = Vec::new();
    for o in outcomes {
        records.push(o.record);
        traces.extend(o.traces);
    }
    Ok(BatchResult { scenario: s.clone(), records, summary, traces })
}

/// Fixed stage for the linkability runs: two capacity-capped entries that
/// pin the pair's bottlenecks plus a fast core that never binds.
fn link_network() -> Result<Vec<Relay>> {
    let caps: [f64; 8] = [1.2e6, 1.35e6, 4.0e6, 5.0e6, 6.0e6, 7.0e6, 8.0e6, 9.0e6];
    caps.iter()
        .enumerate()
        .map(|(i, &c)| {
            Ok(Relay::new(RelayId(i as u32), format!("relay-{i:02}"), c)?.with_flags(true, true))
        })
        .collect()
}

fn run_link_streams(s: &Scenario, network: Option<&[Relay]>) -> Result<BatchResult> {
    let relays = match network {
        Some(r) => r.to_vec(),
        None => link_network()?,
    };
    if relays.len() < 8 {
        return Err(Error::config("link-streams needs at least 8 relays"));
    }
    let mut durations = s.durations.clone();
    durations.sort_by(f64::total_cmp);

    struct LinkOutcome {
        record: RunRecord,
        traces: Vec<(String, ThroughputTrace)>,
        scores: Vec<(f64, f64)>,
        positive: bool,
        errored: bool,
    }
    let outcomes: Vec<LinkOutcome> = (0..s.runs)
        .into_par_iter()
        .map(|idx| {
            let t0 = Instant::now();
            let positive = idx % 2 == 0;
            let seed = derive_seed(s.seed, SALT_RUN, idx as u64);
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(s.seed, SALT_PATH, idx as u64));
            let mut fast: Vec<RelayId> = relays[2..].iter().map(|r| r.id).collect();
            fast.shuffle(&mut rng);
            let choke_a = relays[rng.random_range(0..2)].id;
            let choke_b = relays[if choke_a == relays[0].id { 1 } else { 0 }].id;
            let mut eng = Engine::new(relays.clone(), base_config(s, seed))?;
            eng.run(WARMUP);
            let (stream_a, stream_b) = if positive {
                let path = vec![fast[0], choke_a, fast[1]];
                let c = eng.add_chain_circuit(&path)?;
                let a = eng.add_stream(c, TrafficSource::Bulk)?;
                eng.run(SYNC_DELAY);
                (a, eng.add_stream(c, TrafficSource::Bulk)?)
            } else {
                let c1 = eng.add_chain_circuit(&[fast[0], choke_a, fast[1]])?;
                let c2 = eng.add_chain_circuit(&[fast[2], choke_b, fast[3]])?;
                let a = eng.add_stream(c1, TrafficSource::Bulk)?;
                eng.run(SYNC_DELAY);
                (a, eng.add_stream(c2, TrafficSource::Bulk)?)
            };
            let m0 = eng.clock();
            eng.run(s.duration);
            let end = m0 + s.duration;
            let xa = eng.stream_trace(stream_a, m0, end)?;
            let xb = eng.stream_trace(stream_b, m0, end)?;
            // (macro r, exclusivity) per observation length; NaN on
            // degenerate windows.
            let scores: Vec<(f64, f64)> = durations
                .iter()
                .map(|&d| {
                    match link_streams(
                        &xa.prefix(d),
                        &xb.prefix(d),
                        s.threshold,
                        s.exclusivity_threshold,
                    ) {
                        Ok(v) => (v.macro_r, v.exclusivity),
                        Err(_) => (f64::NAN, f64::NAN),
                    }
                })
                .collect();
            let (r_last, e_last) = *scores.last().expect("at least one duration");
            let errored = scores.iter().any(|(r, e)| r.is_nan() || e.is_nan());
            let linked =
                r_last > s.threshold && e_last > s.exclusivity_threshold;
            let detail = durations
                .iter()
                .zip(&scores)
                .map(|(d, (r, e))| {
                    format!("r{}={};e{}={}", *d as u64, fmt_r(*r), *d as u64, fmt_r(*e))
                })
                .collect::<Vec<_>>()
                .join(";");
            let record = RunRecord {
                scenario: s.kind.name().into(),
                run_index: idx,
                seed,
                truth: if positive { "linked".into() } else { "unlinked".into() },
                verdict: if linked { "linked".into() } else { "unlinked".into() },
                score: r_last,
                detail,
                traces: vec![
                    format!("traces/run_{idx:04}_stream_a.csv"),
                    format!("traces/run_{idx:04}_stream_b.csv"),
                ],
                wall_ms: t0.elapsed().as_millis() as u64,
            };
            Ok(LinkOutcome {
                record,
                traces: vec![
                    (format!("run_{idx:04}_stream_a"), xa.rebucket(SAMPLE_BUCKET)?),
                    (format!("run_{idx:04}_stream_b"), xb.rebucket(SAMPLE_BUCKET)?),
                ],
                scores,
                positive,
                errored,
            })
        })
        .collect::<Result<_>>()?;

    let scored_runs: Vec<(Vec<(f64, f64)>, bool)> =
        outcomes.iter().map(|o| (o.scores.clone(), o.positive)).collect();
    let curves = linkability_curves(s, &durations, &scored_runs)?;

    let positives = outcomes.iter().filter(|o| o.positive).count();
    let summary = Summary::Linkability(LinkabilitySummary {
        runs: s.runs,
        positives,
        negatives: s.runs - positives,
        exclusivity_threshold: s.exclusivity_threshold,
        curves,
        errors: outcomes.iter().filter(|o| o.errored).count(),
    });
    let mut records = Vec::with_capacity(outcomes.len());
    let mut traces = Vec::new();
    for o in outcomes {
        records.push(o.record);
        traces.extend(o.traces);
    }
    Ok(BatchResult { scenario: s.clone(), records, summary, traces })
}

fn run_interactive(s: &Scenario, network: Option<&[Relay]>) -> Result<BatchResult> {
    let relays = resolve_network(s, network)?;
    let model = match &s.traffic {
        Some(m) => m.clone(),
        None => BurstGapModel::synthetic_default(),
    };

    struct IaOutcome {
        record: RunRecord,
        traces: Vec<(String, ThroughputTrace)>,
        score: f64,
        positive: bool,
    }
    let outcomes: Vec<IaOutcome> = (0..s.runs)
        .into_par_iter()
        .map(|idx| {
            let t0 = Instant::now();
            let positive = idx % 2 == 0;
            let mut traffic_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(s.seed, SALT_TRAFFIC, idx as u64));
            let source = generate_interactive(
                &model,
                SYNC_DELAY + s.duration + 60.0,
                s.tick,
                &mut traffic_rng,
            );
            let kind = if positive { PairKind::Same } else { PairKind::Disjoint };
            let (v, a) = pair_run(s, &relays, idx, kind, source)?;
            let active = v.samples.iter().filter(|&&x| x > DEFAULT_ACTIVE_THRESHOLD).count();
            let r = active_interval_correlation(&v, &a, DEFAULT_ACTIVE_THRESHOLD)
                .unwrap_or(f64::NAN);
            let record = RunRecord {
                scenario: s.kind.name().into(),
                run_index: idx,
                seed: derive_seed(s.seed, SALT_RUN, idx as u64),
                truth: if positive { "shared".into() } else { "distinct".into() },
                verdict: if r.is_nan() {
                    "error".into()
                } else if r > s.threshold {
                    "shared".into()
                } else {
                    "distinct".into()
                },
                score: r,
                detail: format!("r_active={};active_buckets={active}", fmt_r(r)),
                traces: vec![
                    format!("traces/run_{idx:04}_victim.csv"),
                    format!("traces/run_{idx:04}_attacker.csv"),
                ],
                wall_ms: t0.elapsed().as_millis() as u64,
            };
            Ok(IaOutcome {
                record,
                traces: vec![
                    (format!("run_{idx:04}_victim"), v),
                    (format!("run_{idx:04}_attacker"), a),
                ],
                score: r,
                positive,
            })
        })
        .collect::<Result<_>>()?;

    let scored: Vec<(f64, bool)> = outcomes
        .iter()
        .map(|o| (if o.score.is_finite() { o.score } else { f64::NEG_INFINITY }, o.positive))
        .collect();
    let errors = outcomes.iter().filter(|o| o.score.is_nan()).count();
    let summary = Summary::InteractiveRoc(interactive_roc_summary(s, &scored, errors)?);
    let mut records = Vec::with_capacity(outcomes.len());
    let mut traces = Vec::new();
    for o in outcomes {
        records.push(o.record);
        traces.extend(o.traces);
    }
    Ok(BatchResult { scenario: s.clone(), records, summary, traces })
}

/// Threshold sweep read off at the false-positive budget: the highest
/// true-positive rate any sampled threshold reaches without spending more
/// than the cap. The top of the grid flags nothing, so a feasible point
/// always exists.
fn interactive_roc_summary(
    s: &Scenario,
    scored: &[(f64, bool)],
    errors: usize,
) -> Result<RocSummary> {
    let curve = score_curve(scored, -1.0, &correlation_grid())?;
    let mut best = (0.0f64, f64::NAN, f64::NAN);
    for p in &curve.points {
        if p.fpr <= ROC_FPR_CAP + 1e-12 {
            let tpr = 1.0 - p.fnr;
            if tpr > best.0 {
                best = (tpr, p.fpr, p.r_threshold);
            }
        }
    }
    let positives = scored.iter().filter(|(_, p)| *p).count();
    Ok(RocSummary {
        runs: s.runs,
        positives,
        negatives: s.runs - positives,
        duration: s.duration,
        fpr_cap: ROC_FPR_CAP,
        tpr_at_fpr_cap: best.0,
        fpr_achieved: best.1,
        threshold_at_cap: best.2,
        points: curve.points,
        errors,
    })
}

/// One error curve per observation length. Exclusivity gates the score
/// exactly as the verdict does: a run that fails the gate (or whose
/// truncated traces were degenerate) can never be flagged, at any
/// threshold.
fn linkability_curves(
    s: &Scenario,
    durations: &[f64],
    scored_runs: &[(Vec<(f64, f64)>, bool)],
) -> Result<Vec<DurationCurve>> {
    let grid = correlation_grid();
    durations
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            let scored: Vec<(f64, bool)> = scored_runs
                .iter()
                .map(|(scores, positive)| {
                    let (r, e) = scores[j];
                    let score = if e > s.exclusivity_threshold && r.is_finite() {
                        r
                    } else {
                        f64::NEG_INFINITY
                    };
                    (score, *positive)
                })
                .collect();
            let curve = score_curve(&scored, s.exclusivity_threshold, &grid)?;
            Ok(DurationCurve { duration: d, cer: curve.cer, points: curve.points })
        })
        .collect()
}

fn detail_map(detail: &str) -> BTreeMap<&str, &str> {
    detail.split(';').filter_map(|kv| kv.split_once('=')).collect()
}

fn detail_f64(map: &BTreeMap<&str, &str>, key: &str) -> f64 {
    map.get(key).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

fn detail_usize(map: &BTreeMap<&str, &str>, key: &str) -> usize {
    map.get(key).and_then(|v| v.parse().ok()).unwrap_or(0)
}

/// Rebuilds the batch summary from persisted run records. Every statistic
/// the inline summary derives from per-run outputs comes back identical;
/// the bottleneck family additionally needs its calibrated constant, which
/// lives in the original summary rather than in any single record.
pub fn recompute_summary(
    s: &Scenario,
    records: &[RunRecord],
    original: Option<&Summary>,
) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::data("no run records to summarize"));
    }
    match s.kind {
        ScenarioKind::AllCommon | ScenarioKind::NoneCommon | ScenarioKind::OneCommon => {
            let checkpoints = checkpoint_list(s);
            let per_run: Vec<Vec<f64>> = records
                .iter()
                .map(|rec| {
                    let m = detail_map(&rec.detail);
                    checkpoints
                        .iter()
                        .map(|c| detail_f64(&m, &format!("r{}", *c as u64)))
                        .collect()
                })
                .collect();
            Ok(Summary::Detection(detection_summary(s, &checkpoints, &per_run)))
        }
        ScenarioKind::IdentifyBottleneck => {
            let Some(Summary::Bottleneck(orig)) = original else {
                return Err(Error::config(
                    "bottleneck summaries carry a calibrated inclusion probability; pass the original summary",
                ));
            };
            let mut entropies: Vec<f64> = records.iter().map(|r| r.score).collect();
            entropies.sort_by(f64::total_cmp);
            let n = entropies.len() as f64;
            let entropy_cdf = entropies
                .iter()
                .enumerate()
                .map(|(i, &e)| CdfPoint { value: e, fraction: (i + 1) as f64 / n })
                .collect();
            let mut drops = Vec::new();
            let mut survivors = Vec::new();
            let mut judged = Vec::new();
            let mut errors = 0usize;
            for rec in records {
                let m = detail_map(&rec.detail);
                drops.push(detail_f64(&m, "entropy_drop_10s"));
                survivors.push(detail_usize(&m, "survivors_10s") as f64);
                match m.get("truth_in_set").copied() {
                    Some("true") => judged.push(true),
                    Some("false") => judged.push(false),
                    _ => {}
                }
                errors += detail_usize(&m, "probe_errors");
            }
            Ok(Summary::Bottleneck(BottleneckSummary {
                runs: s.runs,
                duration: s.duration,
                threshold: s.threshold,
                min_window: s.min_window,
                universe: orig.universe,
                prior_bits: orig.prior_bits,
                calibration_runs: orig.calibration_runs,
                inclusion_probability: orig.inclusion_probability,
                median_entropy_bits: median_of_sorted(&entropies),
                mean_entropy_bits: mean(&entropies),
                entropy_cdf,
                truth_in_set_fraction: if judged.is_empty() {
                    f64::NAN
                } else {
                    judged.iter().filter(|&&b| b).count() as f64 / judged.len() as f64
                },
                mean_entropy_drop_10s: mean(&drops),
                mean_survivors_10s: mean(&survivors),
                errors,
            }))
        }
        ScenarioKind::GuardDiscovery => {
            let mut aggregate: BTreeMap<u32, usize> = BTreeMap::new();
            let mut errors = 0usize;
            for rec in records {
                let m = detail_map(&rec.detail);
                errors += detail_usize(&m, "probe_errors");
                if let Some(counts) = m.get("counts") {
                    for entry in counts.split('|').filter(|e| !e.is_empty()) {
                        if let Some((rid, c)) = entry.split_once(':') {
                            let rid: u32 = rid
                                .strip_prefix('r')
                                .unwrap_or(rid)
                                .parse()
                                .map_err(|_| {
                                    Error::data(format!("bad scoreboard entry {entry:?}"))
                                })?;
                            let c: usize = c.parse().map_err(|_| {
                                Error::data(format!("bad scoreboard entry {entry:?}"))
                            })?;
                            *aggregate.entry(rid).or_insert(0) += c;
                        }
                    }
                }
            }
            Ok(Summary::Guard(GuardSummary {
                repetitions: s.runs,
                reformulations: s.reformulations,
                duration: s.duration,
                threshold: s.threshold,
                min_window: s.min_window,
                top_ranked_fraction: records.iter().filter(|r| r.verdict == r.truth).count()
                    as f64
                    / records.len() as f64,
                mean_guard_hit_rate: mean(&records.iter().map(|r| r.score).collect::<Vec<_>>()),
                aggregate_counts: aggregate,
                errors,
            }))
        }
        ScenarioKind::HiddenService => {
            let n = records.len() as f64;
            Ok(Summary::HiddenService(HiddenServiceSummary {
                runs: s.runs,
                duration: s.duration,
                threshold: s.threshold,
                min_window: s.min_window,
                path_hops: s.universe,
                base_rate: 1.0 / s.universe as f64,
                detection_fraction: records.iter().filter(|r| r.verdict == "detected").count()
                    as f64
                    / n,
                bottleneck_hit_fraction: records.iter().filter(|r| r.truth == "bottleneck").count()
                    as f64
                    / n,
                errors: records.iter().filter(|r| r.verdict == "error").count(),
            }))
        }
        ScenarioKind::LinkStreams => {
            let mut durations = s.durations.clone();
            durations.sort_by(f64::total_cmp);
            let parsed: Vec<(Vec<(f64, f64)>, bool)> = records
                .iter()
                .map(|rec| {
                    let m = detail_map(&rec.detail);
                    let scores = durations
                        .iter()
                        .map(|d| {
                            let k = *d as u64;
                            (detail_f64(&m, &format!("r{k}")), detail_f64(&m, &format!("e{k}")))
                        })
                        .collect();
                    (scores, rec.truth == "linked")
                })
                .collect();
            let curves = linkability_curves(s, &durations, &parsed)?;
            let positives = parsed.iter().filter(|(_, p)| *p).count();
            Ok(Summary::Linkability(LinkabilitySummary {
                runs: s.runs,
                positives,
                negatives: s.runs - positives,
                exclusivity_threshold: s.exclusivity_threshold,
                curves,
                errors: parsed
                    .iter()
                    .filter(|(scores, _)| scores.iter().any(|(r, e)| r.is_nan() || e.is_nan()))
                    .count(),
            }))
        }
        ScenarioKind::InteractivePair => {
            let scored: Vec<(f64, bool)> = records
                .iter()
                .map(|r| {
                    (
                        if r.score.is_finite() { r.score } else { f64::NEG_INFINITY },
                        r.truth == "shared",
                    )
                })
                .collect();
            let errors = records.iter().filter(|r| r.score.is_nan()).count();
            Ok(Summary::InteractiveRoc(interactive_roc_summary(s, &scored, errors)?))
        }
    }
}
