//! `fraclap`: build extension domains, solve boundary problems and run the
//! verification suites from a JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use commands::{Context, Failure, Output};

#[derive(Parser)]
#[command(name = "fraclap", version, about = "Fractional p-Laplacians on metric measure spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy)]
enum Kind {
    Build,
    Solve,
    Verify,
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Verification suite; overrides the config.
    #[arg(long)]
    suite: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the extension domain and write diagnostics.
    Build(Args),
    /// Solve the configured boundary problem.
    Solve(Args),
    /// Run verification suites.
    Verify(Args),
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("FRACLAP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("FRACLAP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(Failure::config)
}

fn run(command: Command) -> Result<Vec<commands::CheckVerdict>, Failure> {
    configure_threads()?;
    let (kind, args) = match command {
        Command::Build(a) => (Kind::Build, a),
        Command::Solve(a) => (Kind::Solve, a),
        Command::Verify(a) => (Kind::Verify, a),
    };
    let loaded = config::load(&args.config).map_err(Failure::config)?;
    let seed = args.seed.unwrap_or(loaded.config.seed);
    let dir = args.out.clone().or_else(|| loaded.config.out.clone()).unwrap_or_else(|| PathBuf::from("fraclap-out"));
    let suite = args.suite.clone().or_else(|| loaded.config.verify.suite.clone()).unwrap_or_else(|| "all".into());
    let out = Output::new(dir)?;
    let ctx = Context { loaded: &loaded, seed, out };
    match kind {
        Kind::Build => commands::build(ctx),
        Kind::Solve => commands::solve(ctx),
        Kind::Verify => commands::verify(ctx, &suite),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    match run(cli.command) {
        Ok(verdicts) => {
            let mut failed = false;
            for v in &verdicts {
                println!("{}: {:?}", v.check, v.verdict);
                failed |= !v.verdict.is_ok();
            }
            println!("wall time {:.3}s", start.elapsed().as_secs_f64());
            if failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
