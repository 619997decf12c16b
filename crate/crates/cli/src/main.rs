//! `erground`: data generation, training, evaluation, ablations, gradient
//! checks and attention export.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Overrides every `--seed` flag when set.
pub const SEED_ENV: &str = "ERGROUND_SEED";

#[derive(Parser, Debug)]
#[command(name = "erground", version, about = "Entity and relation aware 3D grounding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train and test JSONL files plus a summary.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_count: usize,
        #[arg(long)]
        test_count: usize,
        /// Generator settings as `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on DIR/train.jsonl.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model and optimizer settings as `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print referring accuracies of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Train every ablation and depth variant over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// First seed; runs use `seed, seed + 1, ...`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic and numeric gradients of every op and the model.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Export attention maps of one scene as CSV files.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Keeps freed heap pages mapped between training steps. By default glibc
/// trims the heap after each step's large buffers are freed and faults the
/// pages back in on the next one, which nearly doubles training time.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn retain_heap() {
    // SAFETY: mallopt only changes an allocator tunable.
    unsafe {
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn retain_heap() {}

fn main() -> ExitCode {
    retain_heap();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
