use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tlprior::cli::{self, Command};

#[derive(Parser)]
#[command(name = "tlprior", version, about = "MAP transfer learning with source-informed Gaussian priors")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the source task, collect SWAG moments and write the prior bundle.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite an existing bundle.
        #[arg(long)]
        force: bool,
    },
    /// Tune, refit and evaluate every method at every training size.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a 1-D slice between two checkpoints.
    Landscape {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        points: Option<usize>,
        /// Checkpoint at the slice origin (the trained optimum).
        checkpoint_a: PathBuf,
        /// Checkpoint at the far end.
        checkpoint_b: PathBuf,
    },
    /// Render accuracy/NLL tables from a results directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cmd = match args.cmd {
        Cmd::Pretrain { config, out, seed, force } => Command::Pretrain { config, out, seed, force },
        Cmd::Compare { config, out, seed } => Command::Compare { config, out, seed },
        Cmd::Landscape { config, out, seed, points, checkpoint_a, checkpoint_b } => {
            Command::Landscape { config, out, seed, points, a: checkpoint_a, b: checkpoint_b }
        }
        Cmd::Report { out } => Command::Report { results: out },
    };
    match cli::run(cmd) {
        Ok(msg) => {
            // a closed pipe (e.g. `| head`) is not an error
            let _ = writeln!(io::stdout(), "{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
