//! `alamo` — multi-organ volumetric segmentation pipeline in one
//! executable: phantom dataset generation, training, multi-view
//! inference with majority-vote fusion, metric evaluation, and
//! verification suites.
//!
//! Exit codes: 0 success, 1 verification/assertion failure, 2
//! usage/config error, 3 I/O error.

mod cmd;
mod dataset;
mod manifest;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "alamo",
    version,
    about = "Multi-organ volumetric segmentation: phantoms, training, multi-view inference, metrics",
    after_help = "Environment: ALAMO_THREADS caps worker concurrency (0 or unset = auto)."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic phantom datasets
    Phantom {
        #[command(subcommand)]
        cmd: cmd::phantom::PhantomCmd,
    },
    /// Train a model on a dataset directory
    Train(cmd::train::TrainArgs),
    /// Segment a volume with a trained checkpoint
    Infer(cmd::infer::InferArgs),
    /// Evaluate predictions against ground truth
    Eval(cmd::eval::EvalArgs),
    /// Run the self-check suites (gradients, metric oracles, fusion)
    Verify(cmd::verify::VerifyArgs),
}

fn exit_code(err: &alamo::Error) -> i32 {
    use alamo::Error::*;
    match err {
        Config(_) | Invalid(_) | Shape(_) => 2,
        Io(_) | Format(_) => 3,
        NonFinite(_) => 1,
    }
}

fn main() {
    configure_threads();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Phantom { cmd } => cmd::phantom::run(cmd),
        Cmd::Train(args) => cmd::train::run(args),
        Cmd::Infer(args) => cmd::infer::run(args),
        Cmd::Eval(args) => cmd::eval::run(args),
        Cmd::Verify(args) => cmd::verify::run(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn configure_threads() {
    if let Ok(value) = std::env::var("ALAMO_THREADS") {
        if let Ok(n) = value.trim().parse::<usize>() {
            if n > 0 {
                // Errors only if a global pool already exists.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        } else {
            eprintln!("warning: ignoring unparsable ALAMO_THREADS='{value}'");
        }
    }
}
