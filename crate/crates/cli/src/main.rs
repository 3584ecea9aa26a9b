use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "sgflow",
    version,
    about = "Semi-discrete semigeostrophic flow with a free surface"
)]
struct Cli {
    /// one log line per solver iteration
    #[arg(long, global = true)]
    verbose: bool,
    /// worker threads, 0 = all cores
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the static dual problem for the initial cloud and print a report.
    DualSolve(DualSolveArgs),
    /// Run the time loop and write snapshots.
    Simulate(SimulateArgs),
    /// Reconstruct particle trajectories from a run directory.
    Trace(TraceArgs),
    /// Compare a state file's cell volumes against the voxel decomposition.
    Oracle(OracleArgs),
    /// Conservation and bound summaries over a run directory.
    EnergyReport(RunArgs),
}

#[derive(Args, Debug)]
struct DualSolveArgs {
    #[arg(long)]
    config: PathBuf,
    /// also write the report and height field here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// run directory; defaults to `output.dir` of the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// snapshot every K steps; defaults to `output.stride`
    #[arg(long)]
    stride: Option<usize>,
    /// state file to continue from
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TraceArgs {
    /// run directory written by `simulate`
    #[arg(long)]
    run: PathBuf,
    /// particle count; defaults to `trace.particles`
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// trajectory CSV; defaults to `<run>/trajectory.csv`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    state: PathBuf,
    /// defaults to `config.json` next to the state file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    /// allowed `max |vol_voxel - vol| * resolution`
    #[arg(long, default_value_t = commands::ORACLE_CONSTANT)]
    constant: f64,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        log::warn!("thread pool: {e}");
    }
    let result = match cli.command {
        Command::DualSolve(a) => commands::dual_solve(&a.config, a.out.as_deref()),
        Command::Simulate(a) => {
            commands::simulate(&a.config, a.out.as_deref(), a.stride, a.resume.as_deref())
        }
        Command::Trace(a) => commands::trace(&a.run, a.particles, a.seed, a.out.as_deref()),
        Command::Oracle(a) => {
            commands::oracle(&a.state, a.config.as_deref(), a.resolution, a.constant)
        }
        Command::EnergyReport(a) => commands::energy_report(&a.run),
    };
    match result {
        Ok(commands::Outcome::Pass) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Breach(why)) => {
            log::error!("tolerance breach: {why}");
            ExitCode::from(2)
        }
        Err(e) => {
            if let Some(
                sgflow::Error::NotConverged(_) | sgflow::Error::InfeasibleMarginals { .. },
            ) = e.downcast_ref::<sgflow::Error>()
            {
                log::error!("tolerance breach: {e:#}");
                return ExitCode::from(2);
            }
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}
