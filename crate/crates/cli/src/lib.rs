//! `mppd` command line: run scenarios under the detector, localize faulty
//! processes, export reduced views and serve traces over HTTP.

pub mod server;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mppd_core::event_graph::{EventGraph, ProcessRank};
use mppd_core::localizer::{localize, LocalizationReport};
use mppd_core::runtime::{run, SimConfig, DEFAULT_EAGER_THRESHOLD, DEFAULT_TIMEOUT_TICKS};
use mppd_core::scenario::Scenario;
use mppd_core::trace_io::{
    read_trace_file, write_trace, write_trace_file, OutcomeRecord, Trace, TraceHeader,
};
use serde::Deserialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FAILURE_DETECTED: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "mppd",
    version,
    about = "Detect and localize communication errors in message-passing scenarios"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute a scenario and write its trace. Exits 2 when a failure is detected.
    Run(RunArgs),
    /// Print the faulty processes recorded in a trace.
    Localize(LocalizeArgs),
    /// Export a reduced view of a trace.
    View(ViewArgs),
    /// Serve a trace over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    pub scenario: PathBuf,
    /// Trace output path [default: <scenario stem>.trace.jsonl]
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long, env = "MPPD_TIMEOUT_TICKS", default_value_t = DEFAULT_TIMEOUT_TICKS)]
    pub timeout_ticks: u64,
    #[arg(long, default_value_t = DEFAULT_EAGER_THRESHOLD)]
    pub eager_threshold: u64,
    /// Per-manager event buffer capacity.
    #[arg(long)]
    pub capacity: Option<usize>,
    /// Crashes leave no failure events.
    #[arg(long)]
    pub silent_crash: bool,
    /// Run without the detector.
    #[arg(long)]
    pub no_detection: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
}

#[derive(Debug, clap::Args)]
pub struct LocalizeArgs {
    pub trace: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewMode {
    /// Failure events and their direct predecessors.
    #[default]
    Default,
    All,
    /// Only the ranks given with --ranks.
    Ranks,
}

#[derive(Debug, clap::Args)]
pub struct ViewArgs {
    pub trace: PathBuf,
    #[arg(long, value_enum, default_value_t = ViewMode::Default)]
    pub mode: ViewMode,
    /// Comma-separated ranks; implies --mode ranks.
    #[arg(long)]
    pub ranks: Option<String>,
    /// Add ranks that exchange messages with the selected ones.
    #[arg(long)]
    pub related: bool,
    /// Output path; stdout when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    pub trace: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Directory of static viewer assets served under /.
    #[arg(long)]
    pub assets: Option<PathBuf>,
}

/// Parses `"2,5"` into ranks.
pub fn parse_ranks(list: &str) -> Result<BTreeSet<ProcessRank>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>()
                .map(ProcessRank)
                .with_context(|| format!("bad rank `{s}`"))
        })
        .collect()
}

/// The subgraph selected by a view request.
pub fn select_view(
    graph: &EventGraph,
    mode: ViewMode,
    ranks: Option<&str>,
    related: bool,
) -> Result<EventGraph> {
    let mode = if ranks.is_some() {
        ViewMode::Ranks
    } else {
        mode
    };
    match mode {
        ViewMode::Default => Ok(graph.default_view()),
        ViewMode::All => Ok(graph.clone()),
        ViewMode::Ranks => {
            let Some(list) = ranks else {
                bail!("mode `ranks` needs a rank list");
            };
            let set = parse_ranks(list)?;
            if set.is_empty() {
                bail!("empty rank list");
            }
            Ok(graph.isolate_processes(&set, related)?)
        }
    }
}

pub fn report(trace: &Trace) -> LocalizationReport {
    localize(&trace.graph, trace.outcome.terminated_abnormally)
}

pub fn report_json(trace: &Trace) -> String {
    serde_json::to_string_pretty(&report(trace)).expect("report serializes")
}

fn default_output(scenario: &Path) -> PathBuf {
    let stem = scenario.file_stem().unwrap_or_default().to_string_lossy();
    PathBuf::from(format!("{stem}.trace.jsonl"))
}

fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<i32> {
    let text = std::fs::read_to_string(&args.scenario)
        .with_context(|| format!("reading {}", args.scenario.display()))?;
    let file = args
        .scenario
        .file_name()
        .unwrap_or_default()
        .to_string_lossy();
    let scenario = Scenario::parse(&text, &file)?;
    for w in scenario.validate() {
        eprintln!("warning: {w}");
    }
    let cfg = SimConfig {
        timeout_ticks: args.timeout_ticks,
        seed: args.seed,
        buffer_capacity_events: args.capacity,
        eager_threshold: args.eager_threshold,
        silent_crash: args.silent_crash,
        detection: !args.no_detection,
    };
    let outcome = run(&scenario, &cfg);
    let path = args
        .output
        .clone()
        .unwrap_or_else(|| default_output(&args.scenario));
    let header = TraceHeader::new(&scenario.name, scenario.process_count, cfg.timeout_ticks);
    write_trace_file(
        &path,
        &header,
        &outcome.graph,
        &OutcomeRecord::from(&outcome),
    )
    .with_context(|| format!("writing {}", path.display()))?;
    let failures = outcome.graph.events().filter(|e| e.is_failure()).count();
    if outcome.terminated_abnormally {
        writeln!(
            out,
            "abnormal termination at tick {}: {failures} failure event(s); trace written to {}",
            outcome.final_tick,
            path.display()
        )?;
        Ok(EXIT_FAILURE_DETECTED)
    } else {
        writeln!(
            out,
            "normal termination at tick {}; trace written to {}",
            outcome.final_tick,
            path.display()
        )?;
        Ok(EXIT_OK)
    }
}

fn load(path: &Path) -> Result<Trace> {
    read_trace_file(path).with_context(|| format!("reading trace {}", path.display()))
}

fn cmd_localize(args: &LocalizeArgs, out: &mut dyn Write) -> Result<i32> {
    let trace = load(&args.trace)?;
    match args.format {
        ReportFormat::Text => write!(out, "{}", report(&trace).to_text())?,
        ReportFormat::Json => writeln!(out, "{}", report_json(&trace))?,
    }
    Ok(EXIT_OK)
}

fn cmd_view(args: &ViewArgs, out: &mut dyn Write) -> Result<i32> {
    let trace = load(&args.trace)?;
    let view = select_view(&trace.graph, args.mode, args.ranks.as_deref(), args.related)?;
    match &args.output {
        Some(path) => write_trace_file(path, &trace.header, &view, &trace.outcome)
            .with_context(|| format!("writing {}", path.display()))?,
        None => write_trace(&mut &mut *out, &trace.header, &view, &trace.outcome)?,
    }
    Ok(EXIT_OK)
}

fn cmd_serve(args: &ServeArgs, out: &mut dyn Write) -> Result<i32> {
    let trace = load(&args.trace)?;
    let app = server::router(server::AppState::new(trace, args.assets.clone()));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.bind)
            .await
            .with_context(|| format!("binding {}", args.bind))?;
        writeln!(out, "serving on http://{}", listener.local_addr()?)?;
        out.flush()?;
        axum::serve(listener, app).await?;
        Ok(EXIT_OK)
    })
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Run(a) => cmd_run(a, out),
        Command::Localize(a) => cmd_localize(a, out),
        Command::View(a) => cmd_view(a, out),
        Command::Serve(a) => cmd_serve(a, out),
    }
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match execute(&cli, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}
