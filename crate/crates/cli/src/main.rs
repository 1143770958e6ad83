//! `pyrdiff`: generate phantom datasets, train, sample, evaluate and inspect
//! pyramids from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pyrdiff::data::Split;
use pyrdiff::Error;

use config::{CommonArgs, DataArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "pyrdiff", version, about = "Pyramid hierarchical masked diffusion for paired image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic paired phantoms as PGM files plus manifest.jsonl.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train on the training split of a manifest, resuming from the latest
    /// checkpoint in the checkpoint directory when one exists.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Dataset manifest (JSON lines).
        #[arg(long, short)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Start over when the existing checkpoint has a different configuration.
        #[arg(long)]
        force: bool,
    },
    /// Synthesize one image coarse to fine, writing every level as PGM.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source-modality PGM.
        #[arg(long)]
        source: PathBuf,
        /// Target-modality PGM; enables error maps and per-level PSNR.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a split against the copy-source baseline, and
    /// optionally compare it with a second checkpoint by paired t-test.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint for the paired comparison.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, short)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluate only the first N pairs of the split.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump the pyramid levels of a PGM image.
    Decompose {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        patch_size: Option<usize>,
    },
}

fn run(cli: Cli) -> pyrdiff::Result<()> {
    match cli.command {
        Command::GenData { common, data } => {
            let mut c = common.resolve()?;
            data.apply(&mut c.data);
            commands::gen_data(&c)
        }
        Command::Train { common, train, manifest, checkpoint_dir, force } => {
            let mut c = common.resolve()?;
            train.apply(&mut c.train);
            if let Some(m) = manifest {
                c.paths.manifest = m;
            }
            if let Some(d) = checkpoint_dir {
                c.paths.checkpoint_dir = d;
            }
            commands::train(&c, force)
        }
        Command::Sample { common, checkpoint, source, target, seed } => {
            let mut c = common.resolve()?;
            if let Some(s) = seed {
                c.sample_seed = s;
            }
            commands::sample(&mut c, &checkpoint, &source, target.as_deref())
        }
        Command::Eval { common, checkpoint, compare, manifest, split, limit, seed } => {
            let mut c = common.resolve()?;
            if let Some(m) = manifest {
                c.paths.manifest = m;
            }
            if let Some(s) = seed {
                c.eval_seed = s;
            }
            let split: Split = split.parse()?;
            commands::eval(&mut c, &checkpoint, compare.as_deref(), split, limit)
        }
        Command::Decompose { common, input, levels, alpha, patch_size } => {
            let mut c = common.resolve()?;
            TrainArgs { levels, alpha, patch_size, ..Default::default() }.apply(&mut c.train);
            commands::decompose_image(&c, &input)
        }
    }
}

/// 2: configuration, 3: data or IO, 4: numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Corrupt(_) | Error::Version { .. } | Error::Shape { .. } => 3,
        Error::Numeric(_) | Error::Degenerate(_) => 4,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
