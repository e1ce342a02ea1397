mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adhesim", version, about = "Adhesion and receptor-binding simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dot-path override such as `solver.h=0.01`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Suppress the summary on stdout.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Coupled time marching, or pure porous-medium flow without binding.
    Simulate(Common),
    /// Outer fixed point over whole trajectories.
    Picard(Common),
    /// Solve the binding equation for the initial density only.
    BindingSolve(Common),
    /// Compute the well-posedness certificate at the anchor.
    Certificate(Common),
    /// Kantorovich-Rubinstein distance between two measure files.
    Kr {
        first: PathBuf,
        second: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Closed-form tables: point-mass binding profile or ZKB profile.
    Oracle {
        #[arg(long, value_enum, default_value = "point-mass")]
        kind: commands::OracleKind,
        /// Mass of the point-mass anchor; defaults to the initial mass.
        #[arg(long)]
        mass: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Grid refinement study against the ZKB solution.
    Convergence {
        /// Number of grid levels, halving `solver.h` each time.
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ADHESIM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("ADHESIM_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = match &cli.command {
        Command::Simulate(c) | Command::Picard(c) | Command::BindingSolve(c) | Command::Certificate(c) => c.quiet,
        Command::Kr { common, .. } | Command::Oracle { common, .. } | Command::Convergence { common, .. } => common.quiet,
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if quiet { "warn" } else { "info" }))
        .format_timestamp(None)
        .init();
    let result = init_threads().and_then(|_| match cli.command {
        Command::Simulate(c) => commands::simulate(&c),
        Command::Picard(c) => commands::picard(&c),
        Command::BindingSolve(c) => commands::binding_solve(&c),
        Command::Certificate(c) => commands::certificate(&c),
        Command::Kr { first, second, common } => commands::kr(&first, &second, &common),
        Command::Oracle { kind, mass, common } => commands::oracle(kind, mass, &common),
        Command::Convergence { levels, common } => commands::convergence(levels, &common),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
