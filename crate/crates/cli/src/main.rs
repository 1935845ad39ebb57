use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Sweeps and figure data for on-off traffic shaping.
#[derive(Debug, Parser)]
#[command(name = "fairshape", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form queue estimate, mean wait and dummy rate.
    Model(ModelArgs),
    /// Slot-level simulation of the shaper.
    Simulate(SimulateArgs),
    /// Hessian scan of the relaxed waiting time.
    Convexity(ConvexityArgs),
    /// Solve rate allocation scenarios.
    Allocate(AllocateArgs),
    /// Distance statistics for a packet-trace corpus.
    Trace(TraceArgs),
}

#[derive(Debug, Args)]
struct Output {
    /// Write CSV here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GRange {
    #[arg(long, conflicts_with_all = ["g_from", "g_to"])]
    g: Option<u32>,
    #[arg(long, requires = "g_to")]
    g_from: Option<u32>,
    #[arg(long, requires = "g_from")]
    g_to: Option<u32>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Arrival probability per slot; a comma-separated list sweeps it.
    #[arg(long, value_delimiter = ',', required = true)]
    p: Vec<f64>,
    #[arg(long)]
    tau: u32,
    #[command(flatten)]
    g: GRange,
    /// Leave unstable points out of a sweep instead of failing.
    #[arg(long)]
    skip_unstable: bool,
    #[command(flatten)]
    out: Output,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    p: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    tau: u32,
    #[command(flatten)]
    g: GRange,
    /// Measured cycles per point.
    #[arg(long, default_value_t = 1000)]
    cycles: u64,
    /// Discarded cycles before measuring; defaults to a tenth of `--cycles`.
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    out: Output,
}

#[derive(Debug, Args)]
struct ConvexityArgs {
    /// Grid points per axis.
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 0.02)]
    p_lo: f64,
    #[arg(long, default_value_t = 0.95)]
    p_hi: f64,
    /// Smallest gap `c - p`.
    #[arg(long, default_value_t = 0.01)]
    gap: f64,
    /// Points closer than this to `c = 2p` are skipped.
    #[arg(long, default_value_t = 1e-6)]
    kink_guard: f64,
    #[command(flatten)]
    out: Output,
}

#[derive(Debug, Args)]
struct AllocateArgs {
    /// Scenario file: one flow per line, `id sigma psi private`.
    #[arg(long)]
    scenario: PathBuf,
    /// Sweep a deadline, e.g. `sigma1=5:15` or `sigma1=5:15:0.5`.
    #[arg(long)]
    sweep: Option<String>,
    /// Solve the scenario as written, with every flow private, or both.
    #[arg(long, value_enum, default_value_t = commands::Mode::AsWritten)]
    mode: commands::Mode,
    #[arg(long, default_value_t = 1e-3)]
    step_size: f64,
    #[arg(long, default_value_t = 5000)]
    inner_iters: usize,
    #[arg(long, default_value_t = 50)]
    outer_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon_d: f64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long, default_value_t = 10.0)]
    penalty: f64,
    #[command(flatten)]
    out: Output,
}

#[derive(Debug, Args)]
struct TraceArgs {
    /// Trace CSV files (one timestamp per line). Without them a synthetic
    /// corpus is generated.
    inputs: Vec<PathBuf>,
    /// Size of the synthetic corpus.
    #[arg(long, default_value_t = 10)]
    sites: usize,
    /// Length of each synthetic trace, seconds.
    #[arg(long, default_value_t = 15.0)]
    duration: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    slot: f64,
    #[arg(long, default_value_t = 5)]
    g: u32,
    #[arg(long, default_value_t = 10)]
    tau: u32,
    /// DTW warping band, seconds.
    #[arg(long, default_value_t = 0.2)]
    window: f64,
    /// Count bin width, seconds.
    #[arg(long, default_value_t = 0.005)]
    bin: f64,
    /// Also write the per-pair distances here.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Also write per-trace shaping reports here.
    #[arg(long)]
    shaping: Option<PathBuf>,
    #[command(flatten)]
    out: Output,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let invocation = commands::invocation(&argv);
    match commands::run(cli.command, &invocation) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
