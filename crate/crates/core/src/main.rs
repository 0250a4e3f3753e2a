use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use empc_core::commands::{self, Flags};

/// Economic MPC for periodically operated linear systems.
#[derive(Parser)]
#[command(name = "empc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the optimal periodic steady-state problem and write reports.
    SolveSs {
        /// Scenario file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding the scenario's.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sampling seed, overriding the scenario's.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the closed loop and write the trace and summary.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate, then audit dissipativity and Lyapunov descent.
    Certify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Perturb the storage multiplier to exercise the violation path.
        #[arg(long)]
        corrupt_mu: bool,
    },
    /// Run the benchmark pipeline: plain and regularized arms plus a
    /// dissipativity check.
    BenchRichmond {
        /// Scenario overriding the built-in benchmark; must use the
        /// richmond preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        corrupt_mu: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SolveSs { config, out, seed } => commands::cmd_solve_ss(
            config,
            &Flags {
                out: out.clone(),
                seed: *seed,
                corrupt_mu: false,
            },
        ),
        Command::Simulate { config, out, seed } => commands::cmd_simulate(
            config,
            &Flags {
                out: out.clone(),
                seed: *seed,
                corrupt_mu: false,
            },
        ),
        Command::Certify {
            config,
            out,
            seed,
            corrupt_mu,
        } => commands::cmd_certify(
            config,
            &Flags {
                out: out.clone(),
                seed: *seed,
                corrupt_mu: *corrupt_mu,
            },
        ),
        Command::BenchRichmond {
            config,
            out,
            seed,
            corrupt_mu,
        } => commands::cmd_bench_richmond(
            config.as_deref(),
            &Flags {
                out: out.clone(),
                seed: *seed,
                corrupt_mu: *corrupt_mu,
            },
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
