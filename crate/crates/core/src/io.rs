//! Relay-set files, trace files, and batch result directories.
//!
//! Relay sets travel as CSV with a header row or as a JSON array of
//! objects, either way with exactly the fields name, capacity_bytes_per_sec,
//! guard_eligible, exit_eligible. Traces are CSV with a "t_sec,bytes_per_sec"
//! header, one row per sample, timestamps fixed-point at the sample
//! interval's precision and rates at 6 significant digits. A batch directory
//! holds config.json (scenario plus its hash), records.csv, summary.json,
//! traces/, and plot-ready CSV points for the summary's figure family.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::relay::{Relay, RelayId};
use crate::scenario::{BatchResult, RunRecord, Scenario, Summary};
use crate::trace::ThroughputTrace;
use crate::{Error, Result};

const TRACE_HEADER: &str = "t_sec,bytes_per_sec";
const RECORD_HEADER: [&str; 9] =
    ["scenario", "run", "seed", "truth", "verdict", "score", "detail", "traces", "wall_ms"];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelayRow {
    name: String,
    capacity_bytes_per_sec: f64,
    guard_eligible: bool,
    exit_eligible: bool,
}

/// Reads a relay set from CSV or JSON, sniffed from the leading byte.
/// Relay ids are assigned by row order.
pub fn load_relays(path: &Path) -> Result<Vec<Relay>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let rows: Vec<RelayRow> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: invalid relay JSON: {e}", path.display())))?
    } else {
        read_relay_csv(&text, path)?
    };
    if rows.is_empty() {
        return Err(Error::data(format!("{}: no relays defined", path.display())));
    }
    let mut seen = BTreeSet::new();
    let mut relays = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        if !seen.insert(row.name.clone()) {
            return Err(Error::data(format!(
                "{}: duplicate relay name {:?} (record {})",
                path.display(),
                row.name,
                i + 1
            )));
        }
        let relay = Relay::new(RelayId(i as u32), row.name, row.capacity_bytes_per_sec)
            .map_err(|e| Error::data(format!("{}: record {}: {e}", path.display(), i + 1)))?
            .with_flags(row.guard_eligible, row.exit_eligible);
        relays.push(relay);
    }
    Ok(relays)
}

fn read_relay_csv(text: &str, path: &Path) -> Result<Vec<RelayRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .clone();
    let expected = ["name", "capacity_bytes_per_sec", "guard_eligible", "exit_eligible"];
    let got: BTreeSet<&str> = headers.iter().collect();
    if got != expected.iter().copied().collect() {
        return Err(Error::data(format!(
            "{}: header must contain exactly the fields {:?}, got {:?}",
            path.display(),
            expected,
            headers.iter().collect::<Vec<_>>()
        )));
    }
    rdr.deserialize()
        .map(|row| row.map_err(|e| Error::data(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn write_relays_csv(path: &Path, relays: &[Relay]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in relays {
        wtr.serialize(RelayRow {
            name: r.name.clone(),
            capacity_bytes_per_sec: r.capacity,
            guard_eligible: r.guard_eligible,
            exit_eligible: r.exit_eligible,
        })
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    }
    let bytes =
        wtr.into_inner().map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    fs::write(path, bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// One draw from a log-uniform capacity distribution, bytes per second.
pub(crate) fn log_uniform_capacity(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Fraction of synthetic relays drawn below 100 KB/s. A single log-uniform
/// over the full capacity range puts only ~26% of relays that low, so the
/// generator splits at 100 KB/s and draws each side log-uniformly.
pub const SLOW_RELAY_FRACTION: f64 = 0.386;

const CAPACITY_FLOOR: f64 = 20.0e3;
const SLOW_SPLIT: f64 = 100.0e3;
const CAPACITY_CEIL: f64 = 10.0e6;

/// A fully eligible synthetic relay population with capacities spanning
/// 20 KB/s to 10 MB/s.
pub fn synthetic_network(n: usize, seed: u64) -> Result<Vec<Relay>> {
    if n < 3 {
        return Err(Error::config(format!("a network needs at least 3 relays, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (n - 1).to_string().len().max(2);
    (0..n)
        .map(|i| {
            let capacity = if rng.random_bool(SLOW_RELAY_FRACTION) {
                log_uniform_capacity(&mut rng, CAPACITY_FLOOR, SLOW_SPLIT)
            } else {
                log_uniform_capacity(&mut rng, SLOW_SPLIT, CAPACITY_CEIL)
            };
            Ok(Relay::new(RelayId(i as u32), format!("relay-{i:0width$}"), capacity)?
                .with_flags(true, true))
        })
        .collect()
}

/// Decimal places that render multiples of `interval` exactly.
fn interval_decimals(interval: f64) -> usize {
    for d in 0..=9usize {
        let scale = 10f64.powi(d as i32);
        if ((interval * scale).round() / scale - interval).abs() < 1e-9 {
            return d;
        }
    }
    9
}

pub fn write_trace(path: &Path, trace: &ThroughputTrace) -> Result<()> {
    let d = interval_decimals(trace.interval);
    let mut out = String::with_capacity(trace.samples.len() * 24 + TRACE_HEADER.len() + 1);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for (i, v) in trace.samples.iter().enumerate() {
        let t = trace.start + i as f64 * trace.interval;
        writeln!(out, "{t:.d$},{v:.5e}").expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<ThroughputTrace> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRACE_HEADER => {}
        Some(h) => {
            return Err(Error::data(format!(
                "{}: line 1: expected header {TRACE_HEADER:?}, got {h:?}",
                path.display()
            )))
        }
        None => return Err(Error::data(format!("{}: empty trace file", path.display()))),
    }
    let mut ts = Vec::new();
    let mut vs = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 2;
        let (a, b) = line.split_once(',').ok_or_else(|| {
            Error::data(format!("{}: line {lineno}: expected two fields", path.display()))
        })?;
        let t: f64 = a.trim().parse().map_err(|_| {
            Error::data(format!("{}: line {lineno}: bad t_sec {a:?}", path.display()))
        })?;
        let v: f64 = b.trim().parse().map_err(|_| {
            Error::data(format!("{}: line {lineno}: bad bytes_per_sec {b:?}", path.display()))
        })?;
        ts.push(t);
        vs.push(v);
    }
    if ts.len() < 2 {
        return Err(Error::data(format!(
            "{}: a trace needs at least two rows to fix the sample interval",
            path.display()
        )));
    }
    let round9 = |x: f64| (x * 1e9).round() / 1e9;
    let start = round9(ts[0]);
    let interval = round9(ts[1] - ts[0]);
    if !(interval > 0.0) {
        return Err(Error::data(format!(
            "{}: line 3: timestamps must increase",
            path.display()
        )));
    }
    for (i, &t) in ts.iter().enumerate() {
        let expect = start + i as f64 * interval;
        if (t - expect).abs() > interval * 1e-6 {
            return Err(Error::data(format!(
                "{}: line {}: timestamp {t} breaks the {interval} s spacing",
                path.display(),
                i + 2
            )));
        }
    }
    ThroughputTrace::new(start, interval, vs)
}

pub fn config_hash(scenario: &Scenario) -> Result<String> {
    let canonical = serde_json::to_string(scenario)
        .map_err(|e| Error::data(format!("scenario not serializable: {e}")))?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").expect("string write");
        s
    }))
}

#[derive(Serialize)]
struct ConfigFileRef<'a> {
    scenario: &'a Scenario,
    config_hash: &'a str,
}

#[derive(Deserialize)]
struct ConfigFile {
    scenario: Scenario,
    config_hash: String,
}

/// Reads a batch directory's scenario back, refusing one whose config no
/// longer matches its recorded hash.
pub fn read_config(dir: &Path) -> Result<Scenario> {
    let path = dir.join("config.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let file: ConfigFile = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let expect = config_hash(&file.scenario)?;
    if file.config_hash != expect {
        return Err(Error::data(format!(
            "{}: config hash {} does not match the configuration (expected {})",
            path.display(),
            file.config_hash,
            expect
        )));
    }
    Ok(file.scenario)
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

/// Persists one batch: config.json, records.csv, summary.json, the 1 s
/// trace files, and the summary's plot points. Rerunning the same scenario
/// reproduces every file byte for byte.
pub fn write_results(dir: &Path, batch: &BatchResult) -> Result<()> {
    let traces_dir = dir.join("traces");
    fs::create_dir_all(&traces_dir)
        .map_err(|e| Error::data(format!("{}: {e}", traces_dir.display())))?;

    let hash = config_hash(&batch.scenario)?;
    let config = serde_json::to_string_pretty(&ConfigFileRef {
        scenario: &batch.scenario,
        config_hash: &hash,
    })
    .map_err(|e| Error::data(format!("config not serializable: {e}")))?;
    write_text(&dir.join("config.json"), config + "\n")?;

    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(RECORD_HEADER).map_err(|e| Error::data(e.to_string()))?;
    for rec in &batch.records {
        wtr.write_record([
            rec.scenario.as_str(),
            &rec.run_index.to_string(),
            &rec.seed.to_string(),
            &rec.truth,
            &rec.verdict,
            &fmt_f64(rec.score),
            &rec.detail,
            &rec.traces.join("|"),
            &rec.wall_ms.to_string(),
        ])
        .map_err(|e| Error::data(e.to_string()))?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::data(e.to_string()))?;
    fs::write(dir.join("records.csv"), bytes)
        .map_err(|e| Error::data(format!("{}: {e}", dir.join("records.csv").display())))?;

    let summary = serde_json::to_string_pretty(&batch.summary)
        .map_err(|e| Error::data(format!("summary not serializable: {e}")))?;
    write_text(&dir.join("summary.json"), summary + "\n")?;

    for (name, trace) in &batch.traces {
        write_trace(&traces_dir.join(format!("{name}.csv")), trace)?;
    }
    write_plot_points(dir, &batch.summary)
}

fn write_text(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Plot-ready points for whichever figure family the summary belongs to.
fn write_plot_points(dir: &Path, summary: &Summary) -> Result<()> {
    match summary {
        Summary::Detection(d) => {
            let mut out = String::from("checkpoint_s,r_threshold,fraction_above\n");
            for cp in &d.checkpoints {
                for p in &cp.cdf {
                    writeln!(out, "{},{},{}", fmt_f64(cp.at), fmt_f64(p.value), fmt_f64(p.fraction))
                        .expect("string write");
                }
            }
            write_text(&dir.join("detection_cdf.csv"), out)
        }
        Summary::Bottleneck(b) => {
            let mut out = String::from("entropy_bits,fraction\n");
            for p in &b.entropy_cdf {
                writeln!(out, "{},{}", fmt_f64(p.value), fmt_f64(p.fraction)).expect("string write");
            }
            write_text(&dir.join("entropy_cdf.csv"), out)
        }
        Summary::Guard(g) => {
            let mut out = String::from("relay,count\n");
            for (rid, count) in &g.aggregate_counts {
                writeln!(out, "r{rid},{count}").expect("string write");
            }
            write_text(&dir.join("scoreboard.csv"), out)
        }
        Summary::HiddenService(_) => Ok(()),
        Summary::Linkability(l) => {
            let mut out = String::from("duration_s,r_threshold,fpr,fnr\n");
            for c in &l.curves {
                for p in &c.points {
                    writeln!(
                        out,
                        "{},{},{},{}",
                        fmt_f64(c.duration),
                        fmt_f64(p.r_threshold),
                        fmt_f64(p.fpr),
                        fmt_f64(p.fnr)
                    )
                    .expect("string write");
                }
            }
            write_text(&dir.join("error_rates.csv"), out)
        }
        Summary::InteractiveRoc(r) => {
            let mut out = String::from("r_threshold,fpr,tpr\n");
            for p in &r.points {
                writeln!(out, "{},{},{}", fmt_f64(p.r_threshold), fmt_f64(p.fpr), fmt_f64(1.0 - p.fnr))
                    .expect("string write");
            }
            write_text(&dir.join("roc.csv"), out)
        }
    }
}

#[derive(Deserialize)]
struct RecordRow {
    scenario: String,
    run: usize,
    seed: u64,
    truth: String,
    verdict: String,
    score: f64,
    detail: String,
    traces: String,
    wall_ms: u64,
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut records = Vec::new();
    for row in rdr.deserialize::<RecordRow>() {
        let row = row.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        records.push(RunRecord {
            scenario: row.scenario,
            run_index: row.run,
            seed: row.seed,
            truth: row.truth,
            verdict: row.verdict,
            score: row.score,
            detail: row.detail,
            traces: if row.traces.is_empty() {
                Vec::new()
            } else {
                row.traces.split('|').map(str::to_string).collect()
            },
            wall_ms: row.wall_ms,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn relay_csv_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("relays.csv");
        let relays = synthetic_network(5, 11).unwrap();
        write_relays_csv(&path, &relays).unwrap();
        let back = load_relays(&path).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in relays.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.name, b.name);
            assert_eq!(a.capacity.to_bits(), b.capacity.to_bits());
            assert_eq!(a.guard_eligible, b.guard_eligible);
            assert_eq!(a.exit_eligible, b.exit_eligible);
        }
    }

    #[test]
    fn relay_json_accepted_and_unknown_fields_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("relays.json");
        fs::write(
            &path,
            r#"[
                {"name": "a", "capacity_bytes_per_sec": 50000.0,
                 "guard_eligible": true, "exit_eligible": false},
                {"name": "b", "capacity_bytes_per_sec": 80000.0,
                 "guard_eligible": false, "exit_eligible": true}
            ]"#,
        )
        .unwrap();
        let relays = load_relays(&path).unwrap();
        assert_eq!(relays.len(), 2);
        assert_eq!(relays[0].name, "a");
        assert!(!relays[0].exit_eligible);

        fs::write(
            &path,
            r#"[{"name": "a", "capacity_bytes_per_sec": 1.0,
                 "guard_eligible": true, "exit_eligible": true, "mystery": 3}]"#,
        )
        .unwrap();
        let err = load_relays(&path).unwrap_err().to_string();
        assert!(err.contains("mystery"), "diagnostic should name the field: {err}");
    }

    #[test]
    fn relay_csv_rejects_wrong_header_and_duplicates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("relays.csv");
        fs::write(&path, "name,capacity\nx,1\n").unwrap();
        assert!(load_relays(&path).is_err());

        fs::write(
            &path,
            "name,capacity_bytes_per_sec,guard_eligible,exit_eligible\n\
             x,50000,true,true\nx,60000,true,true\n",
        )
        .unwrap();
        let err = load_relays(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn synthetic_population_hits_the_slow_fraction() {
        let relays = synthetic_network(4000, 7).unwrap();
        let slow = relays.iter().filter(|r| r.capacity < 1.0e5).count() as f64 / 4000.0;
        assert!((slow - SLOW_RELAY_FRACTION).abs() < 0.025, "slow fraction {slow}");
        for r in &relays {
            assert!(r.capacity >= 20.0e3 && r.capacity <= 10.0e6);
        }
        assert_eq!(relays[0].name, "relay-0000");
    }

    #[test]
    fn trace_round_trip_is_exact_at_six_digits() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let samples: Vec<f64> = (0..40).map(|i| 1.0e5 + (i as f64) * 13.7).collect();
        let trace = ThroughputTrace::new(60.0, 0.1, samples).unwrap();
        write_trace(&path, &trace).unwrap();
        let once = read_trace(&path).unwrap();
        assert_eq!(once.start, 60.0);
        assert_eq!(once.interval, 0.1);
        assert_eq!(once.len(), 40);
        for (a, b) in trace.samples.iter().zip(&once.samples) {
            assert!((a - b).abs() <= a.abs() * 5e-6, "{a} vs {b}");
        }
        // At the serialized precision the file is a fixed point.
        write_trace(&path, &once).unwrap();
        let twice = read_trace(&path).unwrap();
        assert_eq!(once.samples, twice.samples);
    }

    #[test]
    fn trace_reader_reports_the_offending_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        fs::write(&path, "t_sec,bytes_per_sec\n0.0,1.0\n0.1,bogus\n").unwrap();
        let err = read_trace(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");

        fs::write(&path, "t_sec,bytes_per_sec\n0.0,1.0\n").unwrap();
        assert!(read_trace(&path).is_err(), "single row cannot fix the interval");

        fs::write(&path, "wrong,header\n0.0,1.0\n0.1,2.0\n").unwrap();
        let err = read_trace(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn config_hash_tracks_the_scenario() {
        let a = Scenario::new(crate::scenario::ScenarioKind::AllCommon);
        let mut b = a.clone();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.seed = 1;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }
}
