//! `schwarz-eig run` solves one cluster and writes trace, final values and a
//! JSON summary. `schwarz-eig sweep` repeats the run over fine or coarse
//! levels and aggregates the results into one table.

mod config;
mod run;
mod sweep;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ConfigArgs;
use sweep::Axis;

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "schwarz-eig", version, about = "Interior Laplacian eigenvalues by Schwarz preconditioned block Jacobi-Davidson")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one cluster
    Run(ConfigArgs),
    /// Solve one cluster for each of several fine or coarse levels
    Sweep {
        /// level that varies between columns
        #[arg(long, value_enum)]
        vary: Axis,
        /// levels, e.g. `5 6 7`, `5,6,7` or `5..7`
        #[arg(num_args = 0..)]
        levels: Vec<String>,
        /// solves running at the same time
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn invalid(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_INVALID)
}

fn run(args: &ConfigArgs) -> ExitCode {
    let cfg = match args.resolve() {
        Ok(c) => c,
        Err(e) => return invalid(e),
    };
    let outcome = match run::execute(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    if let Err(e) = run::write_outputs(&cfg.output_dir, &outcome) {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_FAILURE);
    }
    let r = &outcome.report;
    println!(
        "{} after {} iterations, stop norm {:.3e}, output in {}",
        if r.converged { "converged" } else { "not converged" },
        r.iterations,
        r.stop_norm,
        cfg.output_dir.display()
    );
    if r.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_NOT_CONVERGED)
    }
}

fn sweep(axis: Axis, levels: &[String], jobs: usize, args: &ConfigArgs) -> ExitCode {
    let levels = match sweep::parse_levels(levels) {
        Ok(l) => l,
        Err(e) => return invalid(e),
    };
    if jobs == 0 {
        return invalid("--jobs must be at least 1");
    }
    let base = match args.resolve() {
        Ok(c) => c,
        Err(e) => return invalid(e),
    };
    let columns = sweep::sweep(&base, axis, &levels, jobs);
    match sweep::write_table(&base, axis, &columns) {
        Ok(path) => println!("{}", path.display()),
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    if columns.iter().all(|c| c.converged()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_NOT_CONVERGED)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => run(args),
        Command::Sweep { vary, levels, jobs, config } => sweep(*vary, levels, *jobs, config),
    }
}
