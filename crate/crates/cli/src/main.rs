use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod compare;
mod run_spec;

/// Planner and simulator for pipelined MoE training schedules.
#[derive(Parser, Debug)]
#[command(name = "moeplan", version, about)]
struct Cli {
    /// More log output on stderr (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit cost models from a `kind,n,t_ms` benchmark CSV.
    Fit(FitArgs),
    /// Plan pipeline degrees and gradient partitions for a model.
    Plan(PlanArgs),
    /// Simulate a model's layers under one schedule style.
    Simulate(SimulateArgs),
    /// Sweep the configuration grid and compare schedule styles.
    Sweep(SweepArgs),
    /// Compare two JSON or CSV outputs with numeric tolerance.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Benchmark CSV.
    #[arg(long)]
    bench: PathBuf,
    /// Where to write the fitted profile.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "fitted")]
    name: String,
    /// Minimum acceptable r^2 for every kind.
    #[arg(long, default_value_t = 0.99)]
    min_r2: f64,
}

/// Inputs shared by plan and simulate.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Run configuration file (JSON); flags and env override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cluster profile JSON, or `testbed-a` / `testbed-b`.
    #[arg(long)]
    profile: Option<String>,
    /// Model JSON: parallel config plus layers.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    r_max: Option<u32>,
    /// Seed for differential evolution.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    de_population: Option<usize>,
    #[arg(long)]
    de_generations: Option<u32>,
    #[arg(long)]
    de_f: Option<f64>,
    #[arg(long)]
    de_cr: Option<f64>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Directory for plan.json and partition.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// fsmoe, fsmoe_no_iio, pipemoe or sequential.
    #[arg(long, default_value = "fsmoe")]
    style: String,
    /// Previously written plan.json to simulate instead of planning again.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Fixed pipeline degree for every layer and phase.
    #[arg(long)]
    degree: Option<u32>,
    /// Chrome trace output.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Report output (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Built-in profile, parallel config and grid: `a` or `b`.
    #[arg(long, default_value = "b")]
    testbed: String,
    /// Profile JSON overriding the testbed's coefficients.
    #[arg(long)]
    profile: Option<String>,
    /// Grid JSON overriding the default configuration ranges.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    r_max: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Allow grids above the size limit.
    #[arg(long)]
    yes: bool,
    /// Per-case CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary JSON output (stdout when absent).
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    left: PathBuf,
    right: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    rel_tol: f64,
    #[arg(long, default_value_t = 0.0)]
    abs_tol: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a.bench, &a.out, &a.name, a.min_r2),
        Command::Plan(a) => commands::plan(&a.run, a.out_dir.as_deref()),
        Command::Simulate(a) => {
            commands::simulate(&a.run, &a.style, a.plan.as_deref(), a.degree, a.trace.as_deref(), a.out.as_deref())
        }
        Command::Sweep(a) => commands::sweep(&commands::SweepOpts {
            testbed: a.testbed,
            profile: a.profile,
            grid: a.grid,
            r_max: a.r_max,
            seed: a.seed,
            jobs: a.jobs,
            yes: a.yes,
            out: a.out,
            summary: a.summary,
        }),
        Command::Compare(a) => compare::run(&a.left, &a.right, a.rel_tol, a.abs_tol),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
