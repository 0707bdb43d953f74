//! `disco`: profiling, policy planning, simulation, trace replay, reports
//! and the streaming gateway.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 runtime failure.

mod commands;
mod error;
mod run_config;
mod serve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use disco_core::Endpoint;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "disco", version, about = "Cost-constrained device/server LLM serving")]
struct Cli {
    /// TOML config: run settings, or the gateway config for `serve`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every subcommand but `serve` is deterministic in it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit endpoint profiles from measured traces.
    Profile(ProfileArgs),
    /// Compute the dispatch policy for one budget.
    Plan(PlanArgs),
    /// Sweep budgets over a trace for the policy and its baselines.
    Simulate(SimulateArgs),
    /// Replay recorded server timings through the policy at one budget.
    Replay(ReplayArgs),
    /// Run the gateway until SIGINT or SIGTERM.
    Serve(ServeArgs),
    /// Re-render a simulate report as plot data and a summary table.
    Report(ReportArgs),
    /// Write a synthetic log-normal trace.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// JSONL trace of device runs; `ttft_s` is the device TTFT.
    #[arg(long, conflicts_with = "device_preset")]
    pub device_trace: Option<PathBuf>,
    /// Use a built-in phone profile instead of a device trace.
    #[arg(long)]
    pub device_preset: Option<String>,
    /// Fixed device overhead in seconds, used with `--device-preset`.
    #[arg(long, default_value_t = 0.0)]
    pub device_c: f64,
    /// Device decode tokens/s when the device trace has no `tbt_s`.
    #[arg(long)]
    pub device_decode_rate: Option<f64>,
    /// JSONL trace of server runs with `ttft_s`.
    #[arg(long)]
    pub server_trace: PathBuf,
    /// Server inter-token seconds when the server trace has no `tbt_s`.
    #[arg(long)]
    pub server_tbt: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PolicyInputs {
    /// JSONL trace whose prompt lengths the policy is planned over.
    #[arg(long)]
    pub trace: PathBuf,
    /// Profile JSON written by `disco profile`.
    #[arg(long)]
    pub profile: PathBuf,
    /// Constrained endpoint; defaults to the config, then to the dearer one.
    #[arg(long)]
    pub constraint: Option<Endpoint>,
    /// Tail ratio.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub inputs: PolicyInputs,
    /// Budget ratio in [0, 1].
    #[arg(long)]
    pub b: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub inputs: PolicyInputs,
    /// `0.1,0.5,0.9` or `start:end:step`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Independent runs with seeds `seed .. seed + runs`.
    #[arg(long)]
    pub runs: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub inputs: PolicyInputs,
    #[arg(long)]
    pub b: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Start scripted local upstreams in place of the configured ones.
    #[arg(long)]
    pub mock: bool,
    /// Override the listen address.
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json` written by `disco simulate`.
    #[arg(long)]
    pub input: PathBuf,
    /// Metrics in the summary table.
    #[arg(long, value_delimiter = ',', default_value = "mean_ttft_s,p99_ttft_s,total_cost")]
    pub metrics: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Mean of ln(prompt length).
    #[arg(long, default_value_t = 5.0)]
    pub mu: f64,
    /// Standard deviation of ln(prompt length).
    #[arg(long, default_value_t = 0.8)]
    pub sigma: f64,
    /// Mean seconds between arrivals.
    #[arg(long, default_value_t = 1.0)]
    pub interarrival: f64,
    /// Output tokens per request.
    #[arg(long, default_value_t = 128)]
    pub output_tokens: u32,
    /// Attach recorded server TTFTs drawn from LogNormal(mu, sigma), given
    /// as `mu,sigma`.
    #[arg(long, allow_hyphen_values = true)]
    pub server_ttft: Option<String>,
    /// File name inside `--out`.
    #[arg(long, default_value = "trace.jsonl")]
    pub name: String,
}

pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.cmd {
        Command::Serve(a) => serve::run(&g, &a),
        other => {
            std::fs::create_dir_all(&g.out)
                .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", g.out.display())))?;
            match other {
                Command::Profile(a) => commands::profile(&g, &a),
                Command::Plan(a) => commands::plan(&g, &a),
                Command::Simulate(a) => commands::simulate(&g, &a),
                Command::Replay(a) => commands::replay(&g, &a),
                Command::Report(a) => commands::report(&g, &a),
                Command::Synth(a) => commands::synth(&g, &a),
                Command::Serve(_) => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
