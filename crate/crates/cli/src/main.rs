//! `tracediag` — simulate faulted training sessions, summarize per-function
//! behavior patterns, and localize abnormal workers by differential
//! comparison.
//!
//! Exit codes: 0 success, 2 usage or missing input, 3 malformed data,
//! 4 empty or insufficient session, 5 internal invariant breach.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tracediag_core::config::ToolkitConfig;
use tracediag_core::coordinator::{
    plan_profiling, run_agreement_sim, serve_plan, AgreementSimConfig,
};
use tracediag_core::detector::{replay, DegradationDetector, DetectorConfig, MarkerEvent};
use tracediag_core::localize::{render_csv, render_text, AnomalyReport};
use tracediag_core::pipeline::{
    localize_dir_with, run_e2e, summarize_session_with, PipelineError,
};
use tracediag_core::simulator::{
    markers_from_trace, session_digest, simulate_to_dir, SimError, SimSpec,
};
use tracediag_core::trace::{load_worker_trace, TraceError};

#[derive(Parser)]
#[command(name = "tracediag", version, about = "Profiling-trace diagnosis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (JSON); flags > env (TRACEDIAG_*) > file > defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all randomized sampling.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a session directory from a simulation spec.
    Simulate {
        /// Simulation spec file (JSON).
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Print a content digest of the generated directory.
        #[arg(long)]
        digest: bool,
    },
    /// Summarize every worker trace of a session into pattern files.
    Summarize {
        session: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only these worker ranks (comma-separated).
        #[arg(long, value_delimiter = ',')]
        workers: Option<Vec<u32>>,
        /// Also dump the critical segments (debug) into this directory.
        #[arg(long)]
        dump_segments: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Localize abnormal (function, worker) pairs from pattern files.
    Localize {
        patterns: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Also emit per-function distribution CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Run per-function analysis on the thread pool.
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Replay a marker stream (or a trace file) through the degradation
    /// detector; triggers are written to stdout as JSON lines.
    Detect {
        /// Marker file (JSON lines), a worker_*.trace file, or '-' for stdin.
        input: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the synchronized-profiling agreement simulation, or serve a plan
    /// over loopback with --listen.
    Coordinate {
        #[arg(long, default_value_t = 64)]
        daemons: usize,
        #[arg(long, default_value_t = 100.3)]
        trigger_at: f64,
        #[arg(long, default_value_t = 1.0)]
        mean_iteration_s: f64,
        /// Serve the plan on this address (e.g. 127.0.0.1:0) instead of
        /// simulating.
        #[arg(long)]
        listen: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Full pipeline: simulate, detect, coordinate, summarize, localize.
    E2e {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render a saved JSON report as text or CSV.
    Report {
        report: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Trace(t) => trace_code(t),
            PipelineError::Sim(SimError::SpecInvalid(_)) => 3,
            PipelineError::Sim(SimError::Trace(t)) => trace_code(t),
            PipelineError::Localize(_) => 4,
            PipelineError::Detector(_) => 3,
            PipelineError::Io(_) => 2,
            PipelineError::Config(_) => 2,
        };
        CliError::new(code, e.to_string())
    }
}

fn trace_code(e: &TraceError) -> u8 {
    match e {
        TraceError::Io(_) | TraceError::MissingSessionMeta(_) => 2,
        TraceError::MalformedRecord { .. } | TraceError::InvariantViolation { .. } => 3,
        TraceError::EmptyTrace { .. } | TraceError::NoWorkers | TraceError::DuplicateWorker(_) => 4,
    }
}

fn load_config(args: &ConfigArgs) -> Result<ToolkitConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => ToolkitConfig::load(path).map_err(|e| CliError::new(2, e))?,
        None => ToolkitConfig::default(),
    };
    cfg.apply_env();
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    Ok(cfg)
}

fn read_spec(path: &Path) -> Result<SimSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(2, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::new(3, format!("{}: {e}", path.display())))
}

fn write_report(report: &AnomalyReport, path: &Path, format: Format) -> Result<(), CliError> {
    let text = match format {
        Format::Json => {
            serde_json::to_string_pretty(report).map_err(|e| CliError::new(5, e.to_string()))?
        }
        Format::Text => render_text(report),
    };
    std::fs::write(path, text).map_err(|e| CliError::new(2, format!("{}: {e}", path.display())))?;
    Ok(())
}

fn run() -> Result<(), CliError> {
    match Cli::parse().command {
        Command::Simulate { spec, out, config, digest } => {
            let cfg = load_config(&config)?;
            let mut spec = read_spec(&spec)?;
            if let Some(seed) = config.seed {
                spec.seed = seed;
            }
            let (meta, _) = simulate_to_dir(&spec, &out, &cfg).map_err(|e| match e {
                SimError::SpecInvalid(msg) => CliError::new(3, msg),
                SimError::Trace(t) => CliError::new(trace_code(&t), t.to_string()),
            })?;
            println!(
                "wrote {} workers, window {:.1}s at {} Hz -> {}",
                meta.workers,
                spec.window_seconds,
                meta.sample_rate_hz,
                out.display()
            );
            if digest {
                let d = session_digest(&out).map_err(|e| CliError::new(5, e.to_string()))?;
                println!("digest {d:016x}");
            }
            Ok(())
        }
        Command::Summarize { session, out, workers, dump_segments, config } => {
            let cfg = load_config(&config)?;
            let stats = summarize_session_with(
                &session,
                &out,
                &cfg,
                workers.as_deref(),
                dump_segments.as_deref(),
            )?;
            let traces: u64 = stats.iter().map(|s| s.trace_bytes).sum();
            let patterns: u64 = stats.iter().map(|s| s.pattern_bytes).sum();
            println!(
                "summarized {} workers: {} trace bytes -> {} pattern bytes ({:.1e}x)",
                stats.len(),
                traces,
                patterns,
                patterns as f64 / traces as f64
            );
            Ok(())
        }
        Command::Localize { patterns, report, format, csv, parallel, config } => {
            let cfg = load_config(&config)?;
            let result = localize_dir_with(&patterns, &cfg, parallel)?;
            write_report(&result, &report, format)?;
            if let Some(csv_path) = csv {
                std::fs::write(&csv_path, render_csv(&result))
                    .map_err(|e| CliError::new(2, e.to_string()))?;
            }
            let abnormal = result.findings.iter().filter(|f| f.abnormal).count();
            println!(
                "evaluated {} functions over {} workers: {} abnormal findings -> {}",
                result.functions_evaluated,
                result.workers,
                abnormal,
                report.display()
            );
            Ok(())
        }
        Command::Detect { input, config } => {
            let cfg = load_config(&config)?;
            let events = read_markers(&input)?;
            let mut detector = DegradationDetector::new(DetectorConfig::from_config(&cfg));
            let triggers = replay(&mut detector, events)
                .map_err(|e| CliError::new(3, e.to_string()))?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for t in &triggers {
                let line = serde_json::to_string(t).map_err(|e| CliError::new(5, e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| CliError::new(5, e.to_string()))?;
            }
            eprintln!("{} trigger(s)", triggers.len());
            Ok(())
        }
        Command::Coordinate { daemons, trigger_at, mean_iteration_s, listen, config } => {
            let cfg = load_config(&config)?;
            if let Some(addr) = listen {
                let listener = std::net::TcpListener::bind(&addr)
                    .map_err(|e| CliError::new(2, format!("{addr}: {e}")))?;
                let local = listener.local_addr().map_err(|e| CliError::new(5, e.to_string()))?;
                let plan = plan_profiling(trigger_at as u64, mean_iteration_s, &cfg)
                    .map_err(|e| CliError::new(3, e.to_string()))?;
                println!("serving plan {} on {local}", serde_json::to_string(&plan).unwrap());
                let acks = serve_plan(&listener, &plan, daemons)
                    .map_err(|e| CliError::new(5, e.to_string()))?;
                for ack in &acks {
                    println!("{}", serde_json::to_string(ack).unwrap());
                }
                return Ok(());
            }
            let sim = AgreementSimConfig {
                daemons,
                seed: cfg.rng_seed,
                trigger_at_iterations: trigger_at,
                mean_iteration_seconds: mean_iteration_s,
            };
            let out = run_agreement_sim(&sim, &cfg);
            println!(
                "plan: start {} stop {} (window {:.1}s, lead {})",
                out.plan.start_iteration,
                out.plan.stop_iteration,
                out.plan.window_seconds,
                cfg.lead_iterations
            );
            let agreed = out.missed.is_empty()
                && out.profiled.iter().all(|r| {
                    *r == Some((out.plan.start_iteration, out.plan.stop_iteration))
                });
            println!(
                "daemons {}: agreement {}, missed {:?}",
                daemons,
                if agreed { "ok" } else { "FAILED" },
                out.missed
            );
            if !agreed {
                return Err(CliError::new(5, "daemon ranges disagree"));
            }
            Ok(())
        }
        Command::E2e { spec, out, format, config } => {
            let cfg = load_config(&config)?;
            let mut sim_spec = read_spec(&spec)?;
            if let Some(seed) = config.seed {
                sim_spec.seed = seed;
            }
            std::fs::create_dir_all(&out).map_err(|e| CliError::new(2, e.to_string()))?;
            let outcome = run_e2e(&sim_spec, &cfg, Some(&out))?;
            match outcome.trigger {
                Some(t) => println!("trigger: {}", serde_json::to_string(&t).unwrap()),
                None => println!("trigger: none (manual profiling run)"),
            }
            println!(
                "plan: [{}, {}) agreement {}",
                outcome.plan.start_iteration,
                outcome.plan.stop_iteration,
                if outcome.daemons_agreed { "ok" } else { "FAILED" }
            );
            write_report(&outcome.report, &out.join("report.json"), Format::Json)?;
            write_report(&outcome.report, &out.join("report.txt"), Format::Text)?;
            let rendered = match format {
                Format::Text => render_text(&outcome.report),
                Format::Json => serde_json::to_string_pretty(&outcome.report).unwrap(),
            };
            println!("{rendered}");
            Ok(())
        }
        Command::Report { report, format, csv } => {
            let text = std::fs::read_to_string(&report)
                .map_err(|e| CliError::new(2, format!("{}: {e}", report.display())))?;
            let parsed: AnomalyReport = serde_json::from_str(&text)
                .map_err(|e| CliError::new(3, format!("{}: {e}", report.display())))?;
            match format {
                Format::Text => print!("{}", render_text(&parsed)),
                Format::Json => println!("{}", serde_json::to_string_pretty(&parsed).unwrap()),
            }
            if let Some(csv_path) = csv {
                std::fs::write(&csv_path, render_csv(&parsed))
                    .map_err(|e| CliError::new(2, e.to_string()))?;
            }
            Ok(())
        }
    }
}

fn read_markers(input: &Path) -> Result<Vec<MarkerEvent>, CliError> {
    if input.extension().is_some_and(|e| e == "trace") {
        let trace = load_worker_trace(input)
            .map_err(|e| CliError::new(trace_code(&e), e.to_string()))?;
        return Ok(markers_from_trace(&trace));
    }
    let reader: Box<dyn BufRead> = if input.as_os_str() == "-" {
        Box::new(std::io::stdin().lock())
    } else {
        let file = std::fs::File::open(input)
            .map_err(|e| CliError::new(2, format!("{}: {e}", input.display())))?;
        Box::new(std::io::BufReader::new(file))
    };
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::new(2, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: MarkerEvent = serde_json::from_str(&line)
            .map_err(|e| CliError::new(3, format!("{}:{}: {e}", input.display(), i + 1)))?;
        events.push(ev);
    }
    Ok(events)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tracediag: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
