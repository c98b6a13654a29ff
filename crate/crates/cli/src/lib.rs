//! Experiment harness for permutation alignment and linear mode
//! connectivity.
//!
//! Every subcommand reads a flat `key=value` manifest, runs its replicates
//! on up to `--jobs` threads and writes CSV tables plus a `summary.json`
//! embedding the resolved configuration and input hashes.

pub mod commands;
pub mod error;
pub mod experiment;
pub mod jobs;
pub mod manifest;
pub mod output;

use std::path::{Path, PathBuf};

pub use error::{CliError, Result};
pub use manifest::Manifest;

use output::OutDir;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Train,
    Match,
    Barrier,
    Trajectory,
    Imp,
    Transport,
    Triplet,
    Partial,
    PruneAlign,
    Instability,
    Landscape,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Match => "match",
            Command::Barrier => "barrier",
            Command::Trajectory => "trajectory",
            Command::Imp => "imp",
            Command::Transport => "transport",
            Command::Triplet => "triplet",
            Command::Partial => "partial",
            Command::PruneAlign => "prune-align",
            Command::Instability => "instability",
            Command::Landscape => "landscape",
        }
    }
}

/// What a subcommand gets besides its manifest.
pub struct Ctx {
    pub jobs: usize,
    pub out: OutDir,
}

/// Validates the manifest, runs the command and returns the output
/// directory.
pub fn run(command: Command, manifest: &Manifest, jobs: usize, out: &Path) -> Result<PathBuf> {
    let mut ctx = Ctx {
        jobs: jobs.max(1),
        out: OutDir::create(out)?,
    };
    ctx.out.log(&format!("command={} jobs={}", command.name(), ctx.jobs));
    use commands::*;
    match command {
        Command::Train => basic::train(manifest, &mut ctx)?,
        Command::Match => basic::match_cmd(manifest, &mut ctx)?,
        Command::Barrier => basic::barrier(manifest, &mut ctx)?,
        Command::Trajectory => trajectory::trajectory(manifest, &mut ctx)?,
        Command::Partial => trajectory::partial(manifest, &mut ctx)?,
        Command::Instability => trajectory::instability(manifest, &mut ctx)?,
        Command::Landscape => trajectory::landscape(manifest, &mut ctx)?,
        Command::Imp => sparse::imp(manifest, &mut ctx)?,
        Command::Transport => sparse::transport(manifest, &mut ctx)?,
        Command::PruneAlign => sparse::prune_align(manifest, &mut ctx)?,
        Command::Triplet => triplet::triplet(manifest, &mut ctx)?,
    }
    ctx.out.finish()
}

/// Loads the manifest at `config` and runs `command` on it.
pub fn run_file(command: Command, config: &Path, jobs: usize, out: &Path) -> Result<PathBuf> {
    let manifest = Manifest::load(config)?;
    run(command, &manifest, jobs, out)
}
