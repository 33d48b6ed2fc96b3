//! `bsa`: generate reproducible latent bundles, run dense and sparse
//! attention over them, compare outputs, sweep sparsity targets for FLOP
//! tables, and print the anneal schedule.
//!
//! Exit codes: 0 success, 1 tolerance failure in `compare`, 2 usage or
//! config errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod cmds;

#[derive(Parser)]
#[command(name = "bsa", version, about = "Bidirectional sparse attention benchmark and verification tool")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded Q/K/V bundle and write it as .bsal
    Gen(GenArgs),
    /// Run dense + sparse attention over a bundle; write outputs and reports
    Run(RunArgs),
    /// Compare two .bsao outputs against a tolerance
    Compare(CompareArgs),
    /// Sweep sparsity targets and emit a FLOP table as CSV
    Bench(BenchArgs),
    /// Emit the anneal schedule as CSV
    Sched(SchedArgs),
}

#[derive(Args)]
struct GenArgs {
    /// RNG seed
    #[arg(long)]
    seed: u64,
    /// Token grid and head dim, TxHxWxd (e.g. 8x8x8x16)
    #[arg(long)]
    shape: String,
    /// Value distribution: uniform | gaussian
    #[arg(long, default_value = "gaussian")]
    dist: String,
    /// Output .bsal path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Input .bsal bundle
    #[arg(long)]
    bundle: PathBuf,
    /// Block cuboid CtxChxCw (default 4x4x4)
    #[arg(long)]
    block: Option<String>,
    /// Query-selection window inside each block (default 2x2x2; "none"
    /// ranks whole blocks instead)
    #[arg(long)]
    window: Option<String>,
    /// Query retention ratio in (0,1] (default 0.5)
    #[arg(long)]
    r: Option<f64>,
    /// Combined sparsity target in [0,1); derives r and the KV keep
    /// fraction, overriding --k
    #[arg(long)]
    sparsity: Option<f64>,
    /// KV threshold parameter k in [1,N] (default N)
    #[arg(long)]
    k: Option<usize>,
    /// KV selection mode: unified_prob | two_stage (default unified_prob)
    #[arg(long)]
    mode: Option<String>,
    /// two_stage cumulative mass target in (0,1] (default 0.9)
    #[arg(long)]
    tau: Option<f64>,
    /// Query similarity metric: cosine | dot (default cosine)
    #[arg(long)]
    metric: Option<String>,
    /// Directory for outputs (full.bsao, sparse.bsao, q2k.json, flops.json,
    /// report.json)
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON config file; explicit flags win over file values
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// First .bsao file
    #[arg(long)]
    a: PathBuf,
    /// Second .bsao file
    #[arg(long)]
    b: PathBuf,
    /// Max-abs tolerance (exit 1 when exceeded)
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Input .bsal bundle
    #[arg(long)]
    bundle: PathBuf,
    /// Comma-separated sparsity targets, e.g. 0.5,0.86,0.93,0.95
    #[arg(long)]
    sparsities: String,
    /// Block cuboid CtxChxCw (default 4x4x4)
    #[arg(long)]
    block: Option<String>,
    /// Fixed query retention for the knob split (default 0.5)
    #[arg(long)]
    r: Option<f64>,
    /// Write the CSV here as well as stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SchedArgs {
    /// Last step to print (table covers 0..=steps)
    #[arg(long)]
    steps: u64,
    /// KV anneal horizon in steps (default 9000)
    #[arg(long)]
    horizon: Option<u64>,
    /// Write the CSV here as well as stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.cmd {
        Cmd::Gen(a) => cmds::gen(a),
        Cmd::Run(a) => cmds::run(a),
        Cmd::Compare(a) => cmds::compare(a),
        Cmd::Bench(a) => cmds::bench(a),
        Cmd::Sched(a) => cmds::sched(a),
    };
    match run {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
