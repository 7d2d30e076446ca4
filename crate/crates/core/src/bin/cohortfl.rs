use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cohortfl::cli::{cmd_compare, cmd_run, cmd_sweep, exit_code, parse_values};

#[derive(Parser)]
#[command(name = "cohortfl", version, about = "Clustered federated learning simulator")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory of a baseline to report speedup against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Compare time-to-accuracy of two finished runs.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long)]
        target: f64,
    },
    /// Run one experiment per value of a parameter.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match args.command {
        Command::Run { config, out, seed, baseline } => {
            cmd_run(&config, out.as_deref(), seed, baseline.as_deref()).map(|dir| println!("wrote {}", dir.display()))
        }
        Command::Compare { run_a, run_b, target } => {
            cmd_compare(&run_a, &run_b, target).map(|r| print!("{}", r.render()))
        }
        Command::Sweep { config, param, values, out, seed } => parse_values(&values)
            .and_then(|v| cmd_sweep(&config, &param, &v, out.as_deref(), seed))
            .map(|dir| println!("wrote {}", dir.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
