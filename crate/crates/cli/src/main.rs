use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use permalign_cli::{run_file, Command};

/// Permutation alignment and linear mode connectivity experiments.
#[derive(Parser, Debug)]
#[command(name = "permalign", version)]
struct Args {
    command: Command,

    /// Manifest file of `key=value` lines.
    #[arg(long)]
    config: PathBuf,

    /// Replicates run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,

    /// Output directory (default `permalign-out/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let out = args
        .out
        .unwrap_or_else(|| PathBuf::from("permalign-out").join(args.command.name()));
    match run_file(args.command, &args.config, args.jobs, &out) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
