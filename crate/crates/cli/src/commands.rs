use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use fairshape::allocator::{read_scenario, solve_many, AllocationRow, FlowSpec, SolverOptions};
use fairshape::convexity::{scan_convexity, uniform_grid};
use fairshape::model::{mean_waiting_time, miller_queue_estimate, stability_check, QueueBranch, ShaperParams};
use fairshape::report::write_csv;
use fairshape::sim::{simulate_many, SimConfig, SimRow};
use fairshape::trace::{corpus_report, read_trace_csv, synthetic_corpus, CorpusOptions, PacketTrace};
use fairshape::Error;
use serde::Serialize;

use crate::{AllocateArgs, Command, ConvexityArgs, GRange, ModelArgs, SimulateArgs, TraceArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    File { path: String, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::File { .. } => 1,
            CliError::Core(e) => match e {
                Error::Infeasible(_) => 3,
                Error::Unstable { .. }
                | Error::Domain { .. }
                | Error::Degenerate(_)
                | Error::Kink { .. }
                | Error::Straddle { .. } => 2,
                Error::Parse { .. } | Error::Io(_) | Error::Csv(_) => 1,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// Private flags as written in the scenario.
    AsWritten,
    /// Every flow private.
    Private,
    /// Both of the above, one after the other.
    Both,
}

pub fn invocation(argv: &[String]) -> String {
    std::iter::once("fairshape")
        .chain(argv.iter().skip(1).map(String::as_str))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn run(command: Command, invocation: &str) -> Result<()> {
    match command {
        Command::Model(a) => model(a, invocation),
        Command::Simulate(a) => simulate(a, invocation),
        Command::Convexity(a) => convexity(a, invocation),
        Command::Allocate(a) => allocate(a, invocation),
        Command::Trace(a) => trace(a, invocation),
    }
}

fn create(path: &Path) -> Result<Box<dyn Write>> {
    let file = File::create(path).map_err(|source| CliError::File {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Box::new(BufWriter::new(file)))
}

fn emit<T: Serialize>(path: Option<&Path>, invocation: &str, rows: &[T]) -> Result<()> {
    match path {
        Some(path) => write_csv(create(path)?, invocation, rows)?,
        None => write_csv(io::stdout().lock(), invocation, rows)?,
    }
    Ok(())
}

fn g_values(range: &GRange, tau: u32) -> Result<Vec<u32>> {
    let values: Vec<u32> = match (range.g, range.g_from, range.g_to) {
        (Some(g), _, _) => vec![g],
        (None, Some(lo), Some(hi)) if lo <= hi => (lo..=hi).collect(),
        (None, Some(lo), Some(hi)) => return Err(CliError::Usage(format!("--g-from {lo} is above --g-to {hi}"))),
        _ => (1..=tau).collect(),
    };
    if let Some(&g) = values.iter().find(|&&g| g == 0 || g > tau) {
        return Err(Error::Domain {
            name: "g",
            value: f64::from(g),
            expected: "1 <= g <= tau",
        }
        .into());
    }
    Ok(values)
}

#[derive(Serialize)]
struct ModelRow {
    p: f64,
    g: u32,
    tau: u32,
    duty_cycle: f64,
    expected_queue: f64,
    queue_clamped: bool,
    mean_wait: f64,
    dummy_rate: f64,
}

fn model(args: ModelArgs, invocation: &str) -> Result<()> {
    let gs = g_values(&args.g, args.tau)?;
    // A single point is a direct question and still fails when unstable.
    let sweep = args.p.len() * gs.len() > 1;
    let mut rows = Vec::new();
    for &p in &args.p {
        for &g in &gs {
            let params = ShaperParams::new(p, g, args.tau)?;
            if args.skip_unstable && sweep && !params.is_stable() {
                continue;
            }
            let derived = params.derived()?;
            rows.push(ModelRow {
                p,
                g,
                tau: args.tau,
                duty_cycle: params.duty_cycle(),
                expected_queue: derived.expected_queue,
                queue_clamped: derived.queue_branch == QueueBranch::Clamped,
                mean_wait: derived.mean_wait,
                dummy_rate: derived.dummy_rate,
            });
        }
    }
    emit(args.out.output.as_deref(), invocation, &rows)
}

/// A simulated point next to the closed form; the model columns are empty
/// for unstable points.
#[derive(Serialize)]
struct SimulateRow {
    p: f64,
    g: u32,
    tau: u32,
    n_cycles: u64,
    seed: u64,
    mean_wait: f64,
    model_wait: Option<f64>,
    eq_end_green: f64,
    miller_eq: Option<f64>,
    dummy_fraction: f64,
    stable_flag: bool,
}

fn simulate(args: SimulateArgs, invocation: &str) -> Result<()> {
    if args.cycles == 0 {
        return Err(CliError::Usage("--cycles must be positive".into()));
    }
    let mut configs = Vec::new();
    for &p in &args.p {
        for g in g_values(&args.g, args.tau)? {
            let mut cfg = SimConfig::new(ShaperParams::new(p, g, args.tau)?, args.cycles, args.seed)?;
            if let Some(w) = args.warmup {
                cfg = cfg.with_warmup(w);
            }
            configs.push(cfg);
        }
    }
    let rows: Vec<SimulateRow> = configs
        .iter()
        .zip(simulate_many(&configs))
        .map(|(cfg, stats)| {
            let (p, g, tau) = (cfg.params.p, cfg.params.g, cfg.params.tau);
            let stable = stability_check(p, g, tau);
            let sim = SimRow::new(cfg, &stats);
            SimulateRow {
                p: sim.p,
                g: sim.g,
                tau: sim.tau,
                n_cycles: sim.n_cycles,
                seed: sim.seed,
                mean_wait: sim.mean_wait,
                model_wait: stable.then(|| mean_waiting_time(p, g, tau).ok()).flatten(),
                eq_end_green: sim.eq_end_green,
                miller_eq: stable.then(|| miller_queue_estimate(p, g, tau).map(|e| e.value).ok()).flatten(),
                dummy_fraction: sim.dummy_fraction,
                stable_flag: sim.stable_flag,
            }
        })
        .collect();
    emit(args.out.output.as_deref(), invocation, &rows)
}

fn convexity(args: ConvexityArgs, invocation: &str) -> Result<()> {
    if args.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let grid = uniform_grid(args.n, args.p_lo, args.p_hi, args.gap, args.kink_guard);
    let scan = scan_convexity(&grid)?;
    eprintln!(
        "{} points: min w_pp {:.4e}, min w_cc {:.4e}, indefinite share {:.4}",
        scan.points.len(),
        scan.min_w_pp,
        scan.min_w_cc,
        scan.indefinite_fraction
    );
    emit(args.out.output.as_deref(), invocation, &scan.points)
}

/// `sigma<flow>=from:to[:step]`, where `<flow>` is a flow id or a 1-based index.
fn parse_sweep(spec: &str, flows: &[FlowSpec]) -> Result<(usize, Vec<f64>)> {
    let bad = || CliError::Usage(format!("cannot parse sweep `{spec}`; expected e.g. sigma1=5:15"));
    let (key, range) = spec.split_once('=').ok_or_else(bad)?;
    let flow = key.strip_prefix("sigma").ok_or_else(bad)?;
    let index = flows
        .iter()
        .position(|f| f.id == flow)
        .or_else(|| flow.parse::<usize>().ok().filter(|&i| i >= 1 && i <= flows.len()).map(|i| i - 1))
        .ok_or_else(|| CliError::Usage(format!("sweep names unknown flow `{flow}`")))?;
    let parts: Vec<f64> = range.split(':').map(|s| s.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
    let (from, to, step) = match parts[..] {
        [from, to] => (from, to, 1.0),
        [from, to, step] => (from, to, step),
        _ => return Err(bad()),
    };
    if !(step > 0.0) || !(from <= to) {
        return Err(bad());
    }
    let count = ((to - from) / step + 1e-9).floor() as usize;
    Ok((index, (0..=count).map(|k| from + k as f64 * step).collect()))
}

fn allocate(args: AllocateArgs, invocation: &str) -> Result<()> {
    let file = File::open(&args.scenario).map_err(|source| CliError::File {
        path: args.scenario.display().to_string(),
        source,
    })?;
    let flows = read_scenario(file)?;
    let name = args
        .scenario
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    let options = SolverOptions {
        step_size: args.step_size,
        inner_iters: args.inner_iters,
        outer_iters: args.outer_iters,
        epsilon_d: args.epsilon_d,
        tolerance: args.tolerance,
        penalty: args.penalty,
    };
    options.validate()?;

    let variants: Vec<(String, Vec<FlowSpec>)> = {
        let private: Vec<FlowSpec> = flows.iter().map(|f| FlowSpec { private: true, ..f.clone() }).collect();
        match args.mode {
            Mode::AsWritten => vec![(name.clone(), flows.clone())],
            Mode::Private => vec![(format!("{name}/private"), private)],
            Mode::Both => vec![(name.clone(), flows.clone()), (format!("{name}/private"), private)],
        }
    };
    let mut scenarios = Vec::new();
    for (label, base) in variants {
        match &args.sweep {
            None => scenarios.push((label, base)),
            Some(spec) => {
                let (index, sigmas) = parse_sweep(spec, &base)?;
                for sigma in sigmas {
                    let mut flows = base.clone();
                    flows[index] = FlowSpec::new(flows[index].id.clone(), sigma, flows[index].psi, flows[index].private)?;
                    scenarios.push((format!("{label}:sigma{}={sigma}", flows[index].id), flows));
                }
            }
        }
    }
    let problems: Vec<Vec<FlowSpec>> = scenarios.iter().map(|(_, f)| f.clone()).collect();
    let mut rows = Vec::new();
    for ((label, flows), result) in scenarios.iter().zip(solve_many(&problems, &options)) {
        rows.extend(AllocationRow::rows(label, flows, &result?));
    }
    emit(args.out.output.as_deref(), invocation, &rows)
}

fn trace(args: TraceArgs, invocation: &str) -> Result<()> {
    let traces: Vec<PacketTrace> = if args.inputs.is_empty() {
        synthetic_corpus(args.sites, args.duration, args.seed)
    } else {
        args.inputs
            .iter()
            .map(|path| {
                let file = File::open(path).map_err(|source| CliError::File {
                    path: path.display().to_string(),
                    source,
                })?;
                let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok(read_trace_csv(file, label)?.rebased())
            })
            .collect::<Result<_>>()?
    };
    if let Some(t) = traces.iter().find(|t| t.is_empty()) {
        return Err(CliError::Usage(format!("trace `{}` has no packets", t.label)));
    }
    let options = CorpusOptions {
        slot: args.slot,
        g: args.g,
        tau: args.tau,
        window: args.window,
        bin: args.bin,
    };
    let report = corpus_report(&traces, &options)?;
    if let Some(path) = &args.pairs {
        emit(Some(path), invocation, &report.pairs)?;
    }
    if let Some(path) = &args.shaping {
        #[derive(Serialize)]
        struct ShapingRow<'a> {
            trace: &'a str,
            empirical_rate: f64,
            original_duration: f64,
            shaped_duration: f64,
            original_count: usize,
            real_count: usize,
            dummy_count: usize,
            mean_buffer_delay: f64,
        }
        let rows: Vec<_> = traces
            .iter()
            .zip(&report.shape_reports)
            .map(|(t, r)| ShapingRow {
                trace: &t.label,
                empirical_rate: t.empirical_rate(args.slot),
                original_duration: r.original_duration,
                shaped_duration: r.shaped_duration,
                original_count: r.original_count,
                real_count: r.real_count,
                dummy_count: r.dummy_count,
                mean_buffer_delay: r.mean_buffer_delay,
            })
            .collect();
        emit(Some(path), invocation, &rows)?;
    }
    emit(args.out.output.as_deref(), invocation, &report.stats)
}
