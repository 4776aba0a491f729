use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowprint::io;
use flowprint::mux::TrafficSource;
use flowprint::scenario::{self, Scenario, ScenarioKind, Summary};
use flowprint::sim::{Engine, SimConfig};
use flowprint::traffic::{self, BurstGapModel};
use flowprint::{Error, Result};

#[derive(Parser)]
#[command(
    name = "flowprint",
    version,
    about = "Relay-network throughput simulation and measurement attacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one bulk client circuit and write its throughput trace.
    Simulate(SimulateArgs),
    /// Run a scenario batch and write a results directory.
    Attack(AttackArgs),
    /// Recompute a batch's summary from its persisted records and check it
    /// against the stored summary.
    Roc(RocArgs),
    /// Generate a synthetic relay population file.
    GenNetwork(GenNetworkArgs),
    /// Fit a burst/gap traffic model to recorded traces.
    FitTraffic(FitTrafficArgs),
}

#[derive(Args)]
struct NetworkArgs {
    /// Relay set file (CSV or JSON); synthesized when omitted
    #[arg(long)]
    relays: Option<PathBuf>,
    /// Relay count of the synthetic network
    #[arg(long, default_value_t = 25)]
    universe: usize,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    network: NetworkArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Measured seconds after the warmup period
    #[arg(long, default_value_t = 600.0)]
    duration: f64,
    #[arg(long, default_value_t = 0.1)]
    tick: f64,
    /// Background churn circuits
    #[arg(long, default_value_t = 50)]
    background: usize,
    #[arg(long, default_value_t = 0.6)]
    ack_delay: f64,
    /// Output sample width, seconds; use the tick width for raw output
    #[arg(long, default_value_t = 1.0)]
    bucket: f64,
    /// Trace CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    /// all-common, none-common, one-common, identify-bottleneck,
    /// guard-discovery, hidden-service, link-streams, interactive-pair
    #[arg(long, value_parser = parse_kind)]
    kind: ScenarioKind,
    /// Results directory
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    network: NetworkArgs,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Correlation decision threshold
    #[arg(long)]
    threshold: Option<f64>,
    /// Smallest correlation window, seconds
    #[arg(long)]
    window: Option<f64>,
    /// Mutual-exclusivity threshold (link-streams)
    #[arg(long)]
    exclusivity: Option<f64>,
    #[arg(long)]
    tick: Option<f64>,
    #[arg(long)]
    background: Option<usize>,
    #[arg(long)]
    ack_delay: Option<f64>,
    /// Circuits rebuilt per repetition (guard-discovery)
    #[arg(long)]
    reformulations: Option<usize>,
    /// Labeled runs calibrating the candidate-set probability
    /// (identify-bottleneck)
    #[arg(long)]
    calibration_runs: Option<usize>,
    /// Observation lengths for the linkability error curves, seconds
    #[arg(long, value_delimiter = ',')]
    durations: Option<Vec<f64>>,
    /// Burst/gap model JSON for the victim stream (interactive-pair)
    #[arg(long)]
    traffic: Option<PathBuf>,
    /// Skip writing per-run trace files
    #[arg(long)]
    no_traces: bool,
}

#[derive(Args)]
struct RocArgs {
    /// Batch results directory
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Args)]
struct GenNetworkArgs {
    #[arg(long, default_value_t = 25)]
    universe: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relay CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitTrafficArgs {
    /// Trace CSV files of the flows to model
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Model JSON path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> std::result::Result<ScenarioKind, String> {
    s.parse::<ScenarioKind>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 1,
                _ => 2,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Attack(args) => attack(args),
        Command::Roc(args) => roc(args),
        Command::GenNetwork(args) => gen_network(args),
        Command::FitTraffic(args) => fit_traffic(args),
    }
}

fn load_network(args: &NetworkArgs, seed: u64) -> Result<Vec<flowprint::relay::Relay>> {
    match &args.relays {
        Some(path) => io::load_relays(path),
        None => io::synthetic_network(args.universe, seed),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let relays = load_network(&args.network, args.seed)?;
    let cfg = SimConfig {
        tick: args.tick,
        seed: args.seed,
        background_circuits: args.background,
        ack_delay: args.ack_delay,
        ..SimConfig::default()
    };
    let mut eng = Engine::new(relays, cfg)?;
    eng.run(scenario::WARMUP);
    let client = eng.new_client()?;
    let circuit = eng.add_client_circuit(client)?;
    eng.add_stream(circuit, TrafficSource::Bulk)?;
    let start = eng.clock();
    eng.run(args.duration);
    let mut trace = eng.circuit_trace(circuit, start, start + args.duration)?;
    if args.bucket > args.tick {
        trace = trace.rebucket(args.bucket)?;
    }
    io::write_trace(&args.out, &trace)?;
    println!(
        "wrote {}: {} samples at {} s, mean {:.0} bytes/s",
        args.out.display(),
        trace.len(),
        trace.interval,
        trace.mean()
    );
    Ok(())
}

fn attack(args: AttackArgs) -> Result<()> {
    let mut s = Scenario::new(args.kind);
    s.seed = args.seed;
    if let Some(v) = args.runs {
        s.runs = v;
    }
    if let Some(v) = args.duration {
        s.duration = v;
    }
    if let Some(v) = args.threshold {
        s.threshold = v;
    }
    if let Some(v) = args.window {
        s.min_window = v;
    }
    if let Some(v) = args.exclusivity {
        s.exclusivity_threshold = v;
    }
    if let Some(v) = args.tick {
        s.tick = v;
    }
    if let Some(v) = args.background {
        s.background = v;
    }
    if let Some(v) = args.ack_delay {
        s.ack_delay = v;
    }
    if let Some(v) = args.reformulations {
        s.reformulations = v;
    }
    if let Some(v) = args.calibration_runs {
        s.calibration_runs = v;
    }
    if let Some(v) = &args.durations {
        s.durations = v.clone();
    }
    if args.network.relays.is_none() {
        s.universe = args.network.universe;
    }
    if let Some(path) = &args.traffic {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let model: BurstGapModel = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        s.traffic = Some(model);
    }

    let network = match &args.network.relays {
        Some(path) => {
            s.network_file = Some(path.display().to_string());
            Some(io::load_relays(path)?)
        }
        None => None,
    };
    let mut batch = scenario::run_scenario(&s, network.as_deref())?;
    if args.no_traces {
        batch.traces.clear();
    }
    io::write_results(&args.out, &batch)?;
    println!("wrote {}: {} runs of {}", args.out.display(), batch.records.len(), s.kind);
    print_summary(&batch.summary);
    Ok(())
}

fn print_summary(summary: &Summary) {
    match summary {
        Summary::Detection(d) => {
            for cp in &d.checkpoints {
                println!(
                    "  {} s: {:.3} of runs above r = {} ({} errors)",
                    cp.at, cp.detection_fraction, d.threshold, cp.errors
                );
            }
        }
        Summary::Bottleneck(b) => {
            println!(
                "  median posterior entropy {:.3} bits (prior {:.3}), inclusion p = {:.3}",
                b.median_entropy_bits, b.prior_bits, b.inclusion_probability
            );
            println!(
                "  truth in candidate set: {:.3}; mean 10 s entropy drop {:.3}; mean survivors {:.2}",
                b.truth_in_set_fraction, b.mean_entropy_drop_10s, b.mean_survivors_10s
            );
        }
        Summary::Guard(g) => {
            println!(
                "  guard top-ranked in {:.3} of {} repetitions; mean hit rate {:.3}",
                g.top_ranked_fraction, g.repetitions, g.mean_guard_hit_rate
            );
        }
        Summary::HiddenService(h) => {
            println!(
                "  detection {:.3} vs base rate {:.3} over {} hops",
                h.detection_fraction, h.base_rate, h.path_hops
            );
        }
        Summary::Linkability(l) => {
            for c in &l.curves {
                println!("  {} s: crossover error rate {:.4}", c.duration, c.cer);
            }
        }
        Summary::InteractiveRoc(r) => {
            println!(
                "  TPR {:.3} at FPR {:.3} (threshold {:.2}, cap {:.2})",
                r.tpr_at_fpr_cap, r.fpr_achieved, r.threshold_at_cap, r.fpr_cap
            );
        }
    }
}

/// Recompute the summary from records.csv and confirm the stored
/// summary.json says the same thing; print the recomputed tables.
fn roc(args: RocArgs) -> Result<()> {
    let s = io::read_config(&args.dir)?;
    let records = io::read_records(&args.dir.join("records.csv"))?;
    let stored = io::read_summary(&args.dir)?;
    let recomputed = scenario::recompute_summary(&s, &records, Some(&stored))?;
    let a = serde_json::to_string_pretty(&recomputed)
        .map_err(|e| Error::data(format!("summary not serializable: {e}")))?;
    let b = serde_json::to_string_pretty(&stored)
        .map_err(|e| Error::data(format!("summary not serializable: {e}")))?;
    if a != b {
        return Err(Error::data(format!(
            "{}: stored summary does not match the records",
            args.dir.display()
        )));
    }
    println!("{a}");
    eprintln!("recomputed summary matches {}", args.dir.join("summary.json").display());
    Ok(())
}

fn gen_network(args: GenNetworkArgs) -> Result<()> {
    let relays = io::synthetic_network(args.universe, args.seed)?;
    io::write_relays_csv(&args.out, &relays)?;
    let slow = relays.iter().filter(|r| r.capacity < 1.0e5).count();
    println!(
        "wrote {}: {} relays, {} below 100 KB/s",
        args.out.display(),
        relays.len(),
        slow
    );
    Ok(())
}

fn fit_traffic(args: FitTrafficArgs) -> Result<()> {
    let traces: Vec<_> =
        args.traces.iter().map(|p| io::read_trace(p)).collect::<Result<_>>()?;
    let model = traffic::fit_model(&traces)?;
    let json = serde_json::to_string_pretty(&model)
        .map_err(|e| Error::data(format!("model not serializable: {e}")))?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, json + "\n")
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}
