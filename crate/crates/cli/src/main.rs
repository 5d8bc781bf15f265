use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

mod commands;
mod config;
mod report;

/// Spot-price cloud indices and index-tracking migration simulations.
///
/// Every output starts with an echo of the resolved flags, the seed and the
/// tool version. Passing an output back through `--config` reruns it.
#[derive(Debug, Parser)]
#[command(name = "cloudindex", version, args_override_self = true)]
struct Cli {
    /// JSON file of flags (keys are flag names, plus `command`). Flags given
    /// on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize raw price-history dumps against a catalog.
    Ingest(IngestArgs),
    /// Compute an index series over a catalog slice.
    Index(IndexArgs),
    /// Generate synthetic price traces.
    Synth(SynthArgs),
    /// Run a job under a migration policy, one trial per trace set.
    Simulate(SimulateArgs),
    /// Compare simulation reports side by side.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    /// Catalog CSV or JSONL.
    #[arg(long)]
    pub catalog: PathBuf,
    /// Trace file or directory; repeat to merge several.
    #[arg(long, required = true)]
    pub traces: Vec<PathBuf>,
    /// Columns naming the VM in trace rows.
    #[arg(long, default_value = "auto", value_parser = ["auto", "vm-id", "type-zone"])]
    pub schema: String,
    /// What to do with rows for VMs missing from the catalog.
    #[arg(long, default_value = "skip", value_parser = ["skip", "error"])]
    pub unknown: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Normalized `timestamp,vm_id,price` CSV; stdout when absent.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct IndexArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long, required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long, default_value = "auto", value_parser = ["auto", "vm-id", "type-zone"])]
    pub schema: String,
    /// Composition scope: `global`, `region:R`, `zone:Z` or `family:F`.
    #[arg(long, conflicts_with_all = ["zone", "region", "family"])]
    pub scope: Option<String>,
    #[arg(long, conflicts_with_all = ["region", "family"])]
    pub zone: Option<String>,
    #[arg(long, conflicts_with = "family")]
    pub region: Option<String>,
    #[arg(long)]
    pub family: Option<String>,
    /// Only members with at least this many vCPUs.
    #[arg(long, default_value_t = 0.0)]
    pub min_cpu: f64,
    /// Only members with at least this much memory, GB.
    #[arg(long, default_value_t = 0.0)]
    pub min_mem: f64,
    /// First sample, epoch seconds; defaults to when every member has a price.
    #[arg(long, allow_negative_numbers = true)]
    pub start: Option<i64>,
    /// End of the window (exclusive); defaults to one past the last price.
    #[arg(long, allow_negative_numbers = true)]
    pub end: Option<i64>,
    #[arg(long, default_value_t = cloudindex::index::DEFAULT_PERIOD)]
    pub period: i64,
    /// Members without a price at a sample instant are an error or skipped.
    #[arg(long, default_value = "error", value_parser = ["error", "skip"])]
    pub missing: String,
    /// Second scope to compare against; the output becomes JSON.
    #[arg(long)]
    pub vs: Option<String>,
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    pub format: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// JSON list of market specs (`vm_id`, `mean`, `stddev`, ...).
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    pub spec: Option<PathBuf>,
    /// Built-in four-market scenario; also writes its catalog and jobs.
    #[arg(long, value_parser = ["four-market"])]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Multiplies every market's volatility.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Job spec JSON.
    #[arg(long)]
    pub job: PathBuf,
    #[arg(long, default_value = "balanced", value_parser = ["static", "cost", "avail", "balanced"])]
    pub policy: String,
    /// Trace file or directory; each one is a separate trial.
    #[arg(long, required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long, default_value = "auto", value_parser = ["auto", "vm-id", "type-zone"])]
    pub schema: String,
    /// Scope the index and candidate set are drawn from.
    #[arg(long, default_value = "global")]
    pub composition: String,
    /// Seconds between policy decisions.
    #[arg(long, default_value_t = cloudindex::simulator::DEFAULT_EPOCH)]
    pub epoch: i64,
    /// Job start; defaults to when every member has a price.
    #[arg(long, allow_negative_numbers = true)]
    pub start: Option<i64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trailing window for volatility estimates, seconds.
    #[arg(long, default_value_t = 3600)]
    pub sigma_window: i64,
    /// Sampling step inside the volatility window, seconds.
    #[arg(long, default_value_t = 300)]
    pub sigma_sample: i64,
    /// Lookback of the static policy's average price, seconds.
    #[arg(long, default_value_t = 3600)]
    pub static_lookback: i64,
    /// Seconds over which cost-centric savings must repay a migration.
    #[arg(long, default_value_t = 3600.0)]
    pub horizon: f64,
    /// Sufficiency test gating balanced migrations.
    #[arg(long, default_value = "strict", value_parser = ["strict", "off"])]
    pub sufficiency: String,
    #[arg(long, default_value = "argmax-sharpe", value_parser = ["argmax-sharpe", "best-sufficient"])]
    pub balanced_target: String,
    /// Index level fed into the Sharpe score.
    #[arg(long, default_value = "utilization-scaled", value_parser = ["raw", "utilization-scaled"])]
    pub sharpe_index: String,
    /// Migration seconds per GB of memory footprint.
    #[arg(long, default_value_t = 1.0)]
    pub migration_rate: f64,
    /// Minimum migration seconds.
    #[arg(long, default_value_t = 0.0)]
    pub migration_floor: f64,
    /// Fixed migration seconds, overriding rate and floor.
    #[arg(long)]
    pub migration_pinned: Option<f64>,
    /// Seconds from a revocation until the task runs again.
    #[arg(long, default_value_t = 90)]
    pub restart: i64,
    /// Treat a price sitting on the on-demand cap as a revocation.
    #[arg(long)]
    pub capped_as_revocation: bool,
    #[arg(long, default_value = "error", value_parser = ["error", "skip"])]
    pub missing: String,
    /// Abort if the job runs longer than this many seconds.
    #[arg(long)]
    pub max_wallclock: Option<i64>,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Event log, one JSON object per line.
    #[arg(long)]
    #[serde(skip)]
    pub events: Option<PathBuf>,
    /// Per-trial summary CSV.
    #[arg(long)]
    #[serde(skip)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Report files written by `simulate`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Compare reports of different jobs anyway.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value = "text", value_parser = ["text", "csv"])]
    pub format: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Table output; stdout when absent.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// One row per trial, for plotting.
    #[arg(long)]
    #[serde(skip)]
    pub samples: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let argv = match config::expand_argv(std::env::args_os().collect()) {
        Ok(argv) => argv,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Index(a) => commands::index(a),
        Command::Synth(a) => commands::synth(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
