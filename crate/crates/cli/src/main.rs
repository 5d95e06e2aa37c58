//! Command-line harness: dataset generation, train/test splitting,
//! descriptor precomputation, training (deep and shallow paths), evaluation,
//! weight reports, and the gradient-check suite.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

use pyra_core::Error;

#[derive(Parser)]
#[command(name = "pyra", version, about = "Temporal pyramid sequence classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-stream dataset from a spec file.
    Synth {
        /// JSON generator spec; see `SynthSpec` in the README.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for the manifest and feature files.
        #[arg(long)]
        out: PathBuf,
        /// Override the generator seed from the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stratified train/test split of a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Fraction of each class that goes to the train split.
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for train.json / test.json (defaults to the manifest's).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precompute per-node mean descriptors for the shallow path.
    Descriptors {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model (deep or shallow, per the config file).
    Train {
        /// JSON run config; flags below override config entries.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        depth: Option<usize>,
        /// Aggregation variant: concat | average.
        #[arg(long)]
        variant: Option<String>,
        /// Number of pyramid instances per stream (deep path).
        #[arg(long)]
        pyramids: Option<usize>,
        /// Frame schedule speed-up factor K (deep path).
        #[arg(long)]
        speedup_k: Option<usize>,
        /// motion | appearance | joint.
        #[arg(long)]
        stream: Option<String>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a checkpoint on a manifest and write metrics JSON.
    Eval {
        /// `.pyra` checkpoint or shallow model JSON.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Metrics output path (default: metrics.json next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Export learned node weights (CSV per stream and pyramid) and fusion
    /// weights from a checkpoint.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient suite on a tiny model; writes per-block
    /// max relative errors as JSON.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report output path (default: stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => 1,
        Error::Format { .. } | Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
        Error::Numerical(_) => 3,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are success, anything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Synth { spec, out, seed } => commands::synth(&spec, &out, seed),
        Command::Split {
            manifest,
            ratio,
            seed,
            out,
        } => commands::split(&manifest, ratio, seed, out.as_deref()),
        Command::Descriptors {
            manifest,
            depth,
            out,
        } => commands::descriptors(&manifest, depth, &out),
        Command::Train {
            config,
            seed,
            out,
            depth,
            variant,
            pyramids,
            speedup_k,
            stream,
            threads,
        } => commands::train(
            &config,
            config::TrainOverrides {
                seed,
                out,
                depth,
                variant,
                pyramids,
                speedup_k,
                stream,
                threads,
            },
        ),
        Command::Eval {
            checkpoint,
            manifest,
            out,
            threads,
        } => commands::eval(&checkpoint, &manifest, out.as_deref(), threads),
        Command::Report { checkpoint, out } => commands::report(&checkpoint, &out),
        Command::Gradcheck { seed, out } => commands::gradcheck(seed, out.as_deref()),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
