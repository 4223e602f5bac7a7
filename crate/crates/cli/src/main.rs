use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nodegc::workload::{run_workload, ExecMode, RunReport, WorkloadSpec};
use nodegc::{BalanceMode, NumaMode, PlacementPolicy, Runtime, RuntimeConfig};
use nodegc_memprobe::{Kernel, Placement, ProbeConfig, SweepSpec};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "nodegc", version, about = "Split-heap NUMA-aware collector driver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload and emit its report as JSON.
    Bench(RunFlags),
    /// Run a bandwidth probe sweep and emit CSV.
    Memprobe(ProbeFlags),
    /// Run the invariant suite over seeded random workloads.
    Check(CheckFlags),
    /// Print the effective configuration as JSON.
    DumpConfig(RunFlags),
}

/// Byte count with an optional binary `k`, `m` or `g` suffix.
fn parse_size(s: &str) -> Result<usize, String> {
    let s = s.trim();
    let (digits, shift) = match s.chars().last().map(|c| c.to_ascii_lowercase()) {
        Some('k') => (&s[..s.len() - 1], 10),
        Some('m') => (&s[..s.len() - 1], 20),
        Some('g') => (&s[..s.len() - 1], 30),
        _ => (s, 0),
    };
    let n: usize = digits
        .parse()
        .map_err(|_| format!("{s:?} is not a size (e.g. 4096, 64k, 32m)"))?;
    n.checked_shl(shift)
        .filter(|v| v >> shift == n)
        .ok_or_else(|| format!("{s:?} is too large"))
}

/// `N` or `A..B`.
fn parse_seeds(s: &str) -> Result<Range<u64>, String> {
    let bad = || format!("{s:?} is not a seed or A..B range");
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            Ok(a..b)
        }
        None => {
            let n: u64 = s.parse().map_err(|_| bad())?;
            Ok(n..n + 1)
        }
    }
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Configuration file as written by `dump-config`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = parse_size)]
    local_heap: Option<usize>,
    #[arg(long, value_parser = parse_size)]
    chunk: Option<usize>,
    /// Global collection trigger per worker.
    #[arg(long, value_parser = parse_size)]
    trigger: Option<usize>,
    #[arg(long)]
    major_threshold: Option<f64>,
    /// local | interleaved | single
    #[arg(long)]
    placement: Option<PlacementPolicy>,
    /// node | none
    #[arg(long)]
    balance: Option<BalanceMode>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    cores_per_node: Option<usize>,
    /// real | sim
    #[arg(long)]
    numa: Option<NumaMode>,
    #[arg(long, value_parser = parse_size)]
    global_arena: Option<usize>,
    /// Check snapshots and sweeps around every collection.
    #[arg(long)]
    verify: bool,
    /// Workload spec as JSON.
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ops per worker.
    #[arg(long)]
    ops: Option<usize>,
    /// Step workers round-robin on one thread.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write chunk acquire/reuse/retire events as JSON lines.
    #[arg(long)]
    trace_chunks: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    runtime: RuntimeConfig,
    workload: Option<PathBuf>,
    seed: Option<u64>,
    ops_per_worker: Option<usize>,
    deterministic: bool,
    out: Option<PathBuf>,
    trace_chunks: Option<PathBuf>,
}

enum CliError {
    /// Bad flags or configuration; exit 2.
    Usage(String),
    /// The run itself failed; exit 1.
    Failed(String),
}

type CliResult<T> = Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

impl RunFlags {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut c: RunConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        let r = &mut c.runtime;
        macro_rules! set {
            ($($flag:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $dst = v; })*
            };
        }
        set!(
            workers => r.workers,
            local_heap => r.local_heap_bytes,
            chunk => r.chunk_bytes,
            trigger => r.global_trigger_bytes_per_worker,
            major_threshold => r.major_threshold_fraction,
            placement => r.placement,
            balance => r.balance,
            nodes => r.nodes,
            cores_per_node => r.cores_per_node,
            numa => r.numa,
            global_arena => r.global_arena_bytes,
        );
        r.verify |= self.verify;
        if self.workload.is_some() {
            c.workload = self.workload.clone();
        }
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        if self.ops.is_some() {
            c.ops_per_worker = self.ops;
        }
        c.deterministic |= self.deterministic;
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        if self.trace_chunks.is_some() {
            c.trace_chunks = self.trace_chunks.clone();
        }
        c.runtime.trace_chunks |= c.trace_chunks.is_some();
        c.runtime.validate().map_err(usage)?;
        Ok(c)
    }
}

/// The workload a run config describes, with worker counts reconciled.
fn workload_for(c: &mut RunConfig, workers_flag: bool) -> CliResult<WorkloadSpec> {
    let mut spec = match &c.workload {
        Some(p) => {
            let spec: WorkloadSpec = read_json(p)?;
            if !workers_flag {
                c.runtime.workers = spec.workers;
            }
            spec
        }
        None => WorkloadSpec::default(),
    };
    spec.workers = c.runtime.workers;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    if let Some(n) = c.ops_per_worker {
        spec.ops_per_worker = n;
        spec.op_counts = None;
    }
    spec.validate().map_err(usage)?;
    Ok(spec)
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| failed(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> CliResult<()> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(failed)?;
    writeln!(w).and_then(|_| w.flush()).map_err(failed)
}

fn bench(flags: &RunFlags) -> CliResult<()> {
    let mut c = flags.resolve()?;
    let spec = workload_for(&mut c, flags.workers.is_some())?;
    c.runtime.validate().map_err(usage)?;
    let rt = Runtime::new(c.runtime.clone(), spec.table().map_err(usage)?).map_err(failed)?;
    let mode = if c.deterministic { ExecMode::Deterministic } else { ExecMode::Threaded };
    let report = run_workload(&spec, &rt, mode).map_err(failed)?;
    if let Some(p) = &c.trace_chunks {
        let mut w = output(Some(p))?;
        for e in rt.chunks().take_events() {
            serde_json::to_writer(&mut w, &e).map_err(failed)?;
            writeln!(w).map_err(failed)?;
        }
        w.flush().map_err(failed)?;
    }
    write_json(c.out.as_deref(), &report)?;
    if !report.errors.is_empty() {
        return Err(failed(format!("workload failed: {}", report.errors.join("; "))));
    }
    Ok(())
}

fn dump_config(flags: &RunFlags) -> CliResult<()> {
    let c = flags.resolve()?;
    // Printed to stdout; `--out` is part of the config being shown.
    write_json(None, &c)
}

#[derive(Args)]
struct CheckFlags {
    /// Seed or A..B range of seeds.
    #[arg(long, value_parser = parse_seeds, default_value = "0..10")]
    seed: Range<u64>,
    /// Ops per worker instead of the generated count.
    #[arg(long)]
    ops: Option<usize>,
    /// Skip the threaded runs.
    #[arg(long)]
    deterministic: bool,
}

fn run_checked(spec: &WorkloadSpec, balance: BalanceMode, mode: ExecMode) -> Result<RunReport, String> {
    let mut cfg = spec.stress_config();
    cfg.balance = balance;
    let rt = Runtime::new(cfg, spec.table().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let r = run_workload(spec, &rt, mode).map_err(|e| e.to_string())?;
    if let Some(e) = r.errors.first() {
        return Err(format!("{mode:?}/{balance:?}: {e}"));
    }
    if let Some(v) = r.violations.first() {
        return Err(format!(
            "{mode:?}/{balance:?}: {} violation(s), first: {v}",
            r.violations.len()
        ));
    }
    Ok(r)
}

fn check_seed(seed: u64, flags: &CheckFlags) -> Result<RunReport, String> {
    let mut spec = WorkloadSpec::random(seed);
    if let Some(n) = flags.ops {
        spec.ops_per_worker = n;
    }
    let a = run_checked(&spec, BalanceMode::PerNode, ExecMode::Deterministic)?;
    let b = run_checked(&spec, BalanceMode::PerNode, ExecMode::Deterministic)?;
    if a.clone().without_timing() != b.without_timing() {
        return Err("deterministic reruns differ".into());
    }
    // Field writes skip targets that have left the local heap, and when
    // that happens depends on collection timing, which the balance mode
    // changes. Compare the modes on a write-free mix.
    let mut pure = spec.clone();
    pure.mix.write_field = 0.0;
    let node = run_checked(&pure, BalanceMode::PerNode, ExecMode::Deterministic)?;
    let none = run_checked(&pure, BalanceMode::None, ExecMode::Deterministic)?;
    if none.final_checksum != node.final_checksum {
        return Err(format!(
            "balance modes disagree: {} vs {}",
            node.final_checksum, none.final_checksum
        ));
    }
    if !flags.deterministic {
        run_checked(&spec, BalanceMode::PerNode, ExecMode::Threaded)?;
    }
    Ok(a)
}

fn check(flags: &CheckFlags) -> CliResult<()> {
    let mut failures = 0;
    for seed in flags.seed.clone() {
        match check_seed(seed, flags) {
            Ok(r) => println!(
                "seed {seed}: ok ({} workers, {} minor, {} major, {} promotions, {} global)",
                r.workers, r.minor_gcs, r.major_gcs, r.promotions, r.global_gcs
            ),
            Err(e) => {
                failures += 1;
                println!("seed {seed}: FAILED");
                eprintln!("seed {seed}: {e}");
            }
        }
    }
    if failures > 0 {
        return Err(failed(format!("{failures} seed(s) failed")));
    }
    Ok(())
}

#[derive(Args)]
struct ProbeFlags {
    /// Sweep spec as JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// copy | scale | sum | triad, comma separated.
    #[arg(long, value_delimiter = ',')]
    kernel: Vec<Kernel>,
    #[arg(long, value_delimiter = ',')]
    threads: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    stride: Vec<usize>,
    /// aware | cross, comma separated.
    #[arg(long, value_delimiter = ',')]
    placement: Vec<Placement>,
    /// Elements per array (k/m suffixes allowed).
    #[arg(long, value_parser = parse_size)]
    elements: Option<usize>,
    /// Cache size each array must exceed.
    #[arg(long, value_parser = parse_size)]
    cache: Option<usize>,
    /// Repetitions; the best one is reported.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    scalar: Option<f64>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    cores_per_node: Option<usize>,
    #[arg(long)]
    numa: Option<NumaMode>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn memprobe(flags: &ProbeFlags) -> CliResult<()> {
    let mut spec: SweepSpec = match &flags.config {
        Some(p) => read_json(p)?,
        None => SweepSpec::default(),
    };
    if !flags.kernel.is_empty() {
        spec.kernels = flags.kernel.clone();
    }
    if !flags.threads.is_empty() {
        spec.threads = flags.threads.clone();
    }
    if !flags.stride.is_empty() {
        spec.strides = flags.stride.clone();
    }
    if !flags.placement.is_empty() {
        spec.placements = flags.placement.clone();
    }
    let b: &mut ProbeConfig = &mut spec.base;
    if let Some(c) = flags.cache {
        b.cache_bytes = c;
        if flags.elements.is_none() && flags.config.is_none() {
            b.elements = 4 * c / nodegc_memprobe::ELEMENT_BYTES;
        }
    }
    if let Some(v) = flags.elements {
        b.elements = v;
    }
    if let Some(v) = flags.reps {
        b.repetitions = v;
    }
    if let Some(v) = flags.scalar {
        b.scalar = v;
    }
    if let Some(v) = flags.nodes {
        b.nodes = v;
    }
    if let Some(v) = flags.cores_per_node {
        b.cores_per_node = v;
    }
    if let Some(v) = flags.numa {
        b.numa = v;
    }
    for cfg in spec.configs() {
        // Only checks that do not depend on the matrix coordinates.
        let probe = ProbeConfig { stride: 1, threads: 1, ..cfg };
        probe.validate().map_err(usage)?;
    }
    let rows = nodegc_memprobe::sweep(&spec);
    let w = output(flags.out.as_deref())?;
    nodegc_memprobe::write_csv(&rows, w).map_err(failed)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match &cli.cmd {
        Cmd::Bench(f) => bench(f),
        Cmd::Memprobe(f) => memprobe(f),
        Cmd::Check(f) => check(f),
        Cmd::DumpConfig(f) => dump_config(f),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Failed(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
