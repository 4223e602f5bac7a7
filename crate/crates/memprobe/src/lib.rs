//! STREAM-style memory bandwidth probe with strided access and control
//! over which node the arrays live on.
//!
//! Every thread owns its own segment of the three arrays. Threads are
//! assigned to nodes sparsely (thread `t` on node `t mod nodes`) and the
//! segment is bound either to the thread's node or to the next one over
//! before it is first touched. Each repetition is timed per thread; the
//! best repetition gives the reported figures.
//!
//! Useful bytes per pass are `streams * touched * 8`, where `touched` is
//! the number of elements the stride visits. Latency is the best pass time
//! divided by `touched`.

use std::fs;
use std::io::Write;
use std::str::FromStr;
use std::sync::Barrier;
use std::time::Instant;

use nodegc::memory::Arena;
use nodegc::topology::{NodeId, NumaMode, Topology};
use serde::{Deserialize, Serialize};

pub const ELEMENT_BYTES: usize = 8;
/// Value left in untouched destination elements.
pub const SENTINEL: f64 = -1.0;
const FALLBACK_CACHE_BYTES: usize = 8 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("invalid probe configuration: {0}")]
    Config(String),
    #[error("host memory: {0}")]
    Memory(String),
    #[error("thread {thread}: element {index} is {got}, expected {want}")]
    Verification {
        thread: usize,
        index: usize,
        got: f64,
        want: f64,
    },
    #[error("probe thread panicked")]
    Panicked,
}

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// `a[i] = b[i]`
    Copy,
    /// `a[i] = s*b[i]`
    Scale,
    /// `a[i] = b[i]+c[i]`
    Sum,
    /// `a[i] = b[i]+s*c[i]`
    Triad,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [Kernel::Copy, Kernel::Scale, Kernel::Sum, Kernel::Triad];

    /// Arrays read or written per element.
    pub fn streams(self) -> usize {
        match self {
            Kernel::Copy | Kernel::Scale => 2,
            Kernel::Sum | Kernel::Triad => 3,
        }
    }

    #[inline]
    pub fn apply(self, s: f64, b: f64, c: f64) -> f64 {
        match self {
            Kernel::Copy => b,
            Kernel::Scale => s * b,
            Kernel::Sum => b + c,
            Kernel::Triad => b + s * c,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Copy => "copy",
            Kernel::Scale => "scale",
            Kernel::Sum => "sum",
            Kernel::Triad => "triad",
        }
    }
}

impl FromStr for Kernel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown kernel {s:?} (expected copy|scale|sum|triad)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    /// Arrays on the thread's own node.
    #[serde(rename = "aware")]
    NumaAware,
    /// Arrays on the next node over.
    #[serde(rename = "cross")]
    CrossNode,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::NumaAware => "aware",
            Placement::CrossNode => "cross",
        }
    }

    fn memory_node(self, node: NodeId, nodes: usize) -> NodeId {
        match self {
            Placement::NumaAware => node,
            Placement::CrossNode => (node + 1) % nodes,
        }
    }
}

impl FromStr for Placement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "aware" => Ok(Placement::NumaAware),
            "cross" => Ok(Placement::CrossNode),
            _ => Err(format!("unknown placement {s:?} (expected aware|cross)")),
        }
    }
}

/// Size of the largest cache level reported by sysfs.
pub fn detect_cache_bytes() -> Option<usize> {
    let mut best: Option<(u32, usize)> = None;
    for i in 0..8 {
        let dir = format!("/sys/devices/system/cpu/cpu0/cache/index{i}");
        let Ok(level) = fs::read_to_string(format!("{dir}/level")) else {
            break;
        };
        let Ok(size) = fs::read_to_string(format!("{dir}/size")) else {
            continue;
        };
        let (Ok(level), Some(size)) = (level.trim().parse::<u32>(), parse_size(size.trim())) else {
            continue;
        };
        if best.is_none_or(|(l, _)| level > l) {
            best = Some((level, size));
        }
    }
    best.map(|(_, s)| s)
}

fn parse_size(s: &str) -> Option<usize> {
    let (num, mult) = match s.as_bytes().last()? {
        b'K' => (&s[..s.len() - 1], 1 << 10),
        b'M' => (&s[..s.len() - 1], 1 << 20),
        b'G' => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.parse::<usize>().ok().map(|n| n * mult)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub kernel: Kernel,
    pub threads: usize,
    /// Elements per array, split across threads.
    pub elements: usize,
    pub stride: usize,
    pub placement: Placement,
    pub repetitions: usize,
    pub scalar: f64,
    pub nodes: usize,
    pub cores_per_node: usize,
    pub numa: NumaMode,
    /// Cache size guess each array must exceed.
    pub cache_bytes: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let cache_bytes = detect_cache_bytes().unwrap_or(FALLBACK_CACHE_BYTES);
        ProbeConfig {
            kernel: Kernel::Triad,
            threads: 1,
            elements: 4 * cache_bytes / ELEMENT_BYTES,
            stride: 1,
            placement: Placement::NumaAware,
            repetitions: 10,
            scalar: 3.0,
            nodes: 1,
            cores_per_node: 1,
            numa: NumaMode::Simulated,
            cache_bytes,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ProbeError::Config(m));
        if self.stride == 0 {
            return bad("stride must be at least 1".into());
        }
        if self.threads == 0 || self.repetitions == 0 {
            return bad("threads and repetitions must be at least 1".into());
        }
        if self.nodes == 0 || self.cores_per_node == 0 {
            return bad("nodes and cores_per_node must be at least 1".into());
        }
        if self.elements < self.threads {
            return bad(format!(
                "{} elements cannot be split over {} threads",
                self.elements, self.threads
            ));
        }
        if self.elements * ELEMENT_BYTES <= self.cache_bytes {
            return bad(format!(
                "arrays of {} bytes do not exceed the {} byte cache",
                self.elements * ELEMENT_BYTES,
                self.cache_bytes
            ));
        }
        if !self.scalar.is_finite() {
            return bad("scalar must be finite".into());
        }
        Ok(())
    }

    fn segment(&self, t: usize) -> usize {
        self.elements / self.threads + usize::from(t < self.elements % self.threads)
    }
}

/// Number of elements a pass over `n` elements with `stride` touches.
pub fn touched(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Useful bytes one pass moves.
pub fn useful_bytes(kernel: Kernel, n: usize, stride: usize) -> u64 {
    (kernel.streams() * touched(n, stride) * ELEMENT_BYTES) as u64
}

/// One strided pass of `kernel`, writing `a`.
pub fn run_pass(kernel: Kernel, s: f64, stride: usize, a: &mut [f64], b: &[f64], c: &[f64]) {
    let n = a.len();
    assert!(b.len() == n && c.len() == n && stride > 0);
    let mut i = 0;
    match kernel {
        Kernel::Copy => {
            while i < n {
                a[i] = b[i];
                i += stride;
            }
        }
        Kernel::Scale => {
            while i < n {
                a[i] = s * b[i];
                i += stride;
            }
        }
        Kernel::Sum => {
            while i < n {
                a[i] = b[i] + c[i];
                i += stride;
            }
        }
        Kernel::Triad => {
            while i < n {
                a[i] = b[i] + s * c[i];
                i += stride;
            }
        }
    }
}

/// First element of `a` that differs from the kernel's result at touched
/// indices or from [`SENTINEL`] elsewhere, as `(index, got, want)`.
pub fn check_pass(
    kernel: Kernel,
    s: f64,
    stride: usize,
    a: &[f64],
    b: &[f64],
    c: &[f64],
) -> Option<(usize, f64, f64)> {
    (0..a.len()).find_map(|i| {
        let want = if i % stride == 0 {
            kernel.apply(s, b[i], c[i])
        } else {
            SENTINEL
        };
        (a[i].to_bits() != want.to_bits()).then_some((i, a[i], want))
    })
}

/// Source values; small integers keep every kernel exact.
fn source(i: usize) -> (f64, f64) {
    ((i % 4096) as f64, ((i * 3 + 1) % 4096) as f64)
}

/// A page-aligned array of `f64` placed on a node before first touch.
struct NodeArray {
    arena: Arena,
    len: usize,
}

impl NodeArray {
    fn new(topo: &Topology, len: usize, node: NodeId) -> Result<Self> {
        let arena =
            Arena::reserve(len * ELEMENT_BYTES).map_err(|e| ProbeError::Memory(e.to_string()))?;
        topo.bind_memory(arena.base(), arena.len(), node);
        Ok(NodeArray { arena, len })
    }

    fn as_mut_slice(&mut self) -> &mut [f64] {
        // SAFETY: the mapping is at least len * 8 bytes, page aligned, zeroed,
        // and owned exclusively through &mut self.
        unsafe { std::slice::from_raw_parts_mut(self.arena.base() as *mut f64, self.len) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreadResult {
    pub thread: usize,
    pub node: NodeId,
    pub memory_node: NodeId,
    pub elements: usize,
    pub touched: usize,
    pub useful_bytes: u64,
    pub best_ns: u64,
    pub mean_ns: u64,
    pub mb_per_s: f64,
    pub latency_ns: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub kernel: Kernel,
    pub threads: usize,
    pub nodes_active: usize,
    pub stride: usize,
    pub placement: Placement,
    pub repetitions: usize,
    /// Sum of the per-thread bandwidths.
    pub mb_per_s: f64,
    pub mb_per_s_per_node: f64,
    /// Mean of the per-thread latencies.
    pub latency_ns: f64,
    pub per_thread: Vec<ThreadResult>,
    /// Placement and pinning were bookkeeping only.
    pub simulated: bool,
    /// False when the timing says nothing about NUMA effects.
    pub numa_meaningful: bool,
    pub notes: Vec<String>,
}

fn mb_per_s(bytes: u64, ns: u64) -> f64 {
    bytes as f64 * 1e3 / ns.max(1) as f64
}

/// Runs one configuration. Destination arrays are verified exactly after
/// the last repetition.
pub fn run_kernel(cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    let topo = Topology::new(cfg.nodes, cfg.cores_per_node, cfg.numa)
        .map_err(|e| ProbeError::Config(e.to_string()))?;
    let barrier = Barrier::new(cfg.threads);
    let outcomes: Vec<Result<ThreadResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.threads)
            .map(|t| {
                let (topo, barrier) = (&topo, &barrier);
                s.spawn(move || probe_thread(cfg, topo, barrier, t))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or(Err(ProbeError::Panicked)))
            .collect()
    });
    let per_thread = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let nodes_active = cfg.threads.min(cfg.nodes);
    let total: f64 = per_thread.iter().map(|r| r.mb_per_s).sum();
    let latency = per_thread.iter().map(|r| r.latency_ns).sum::<f64>() / per_thread.len() as f64;
    let simulated = topo.mode() == NumaMode::Simulated;
    let mut notes = Vec::new();
    if simulated {
        notes.push("simulated topology: timing not NUMA-meaningful".to_string());
    }
    if cfg.placement == Placement::CrossNode && cfg.nodes < 2 {
        notes.push("cross-node placement on a single node: timing not NUMA-meaningful".into());
    }
    if per_thread.iter().any(|r| cfg.stride >= r.elements) {
        notes.push("stride covers the whole segment: timing not NUMA-meaningful".into());
    }
    Ok(ProbeResult {
        kernel: cfg.kernel,
        threads: cfg.threads,
        nodes_active,
        stride: cfg.stride,
        placement: cfg.placement,
        repetitions: cfg.repetitions,
        mb_per_s: total,
        mb_per_s_per_node: total / nodes_active as f64,
        latency_ns: latency,
        per_thread,
        simulated,
        numa_meaningful: notes.is_empty(),
        notes,
    })
}

fn probe_thread(cfg: &ProbeConfig, topo: &Topology, barrier: &Barrier, t: usize) -> Result<ThreadResult> {
    let node = topo.assign_worker_node(t, cfg.threads);
    let memory_node = cfg.placement.memory_node(node, cfg.nodes);
    // Arrays are allocated even if pinning fails so the barrier is always met.
    let pinned = topo.pin_current_thread(node);
    let n = cfg.segment(t);
    let mut arrays = (|| {
        let mut a = NodeArray::new(topo, n, memory_node)?;
        let mut b = NodeArray::new(topo, n, memory_node)?;
        let mut c = NodeArray::new(topo, n, memory_node)?;
        let (bs, cs) = (b.as_mut_slice(), c.as_mut_slice());
        for i in 0..n {
            (bs[i], cs[i]) = source(i);
        }
        a.as_mut_slice().fill(SENTINEL);
        Ok::<_, ProbeError>((a, b, c))
    })();
    let mut times = Vec::with_capacity(cfg.repetitions);
    for _ in 0..cfg.repetitions {
        barrier.wait();
        if let Ok((a, b, c)) = arrays.as_mut() {
            let (a, b, c) = (a.as_mut_slice(), b.as_mut_slice(), c.as_mut_slice());
            let start = Instant::now();
            run_pass(cfg.kernel, cfg.scalar, cfg.stride, a, b, c);
            times.push(start.elapsed().as_nanos() as u64);
        }
    }
    pinned.map_err(|e| ProbeError::Config(e.to_string()))?;
    let (mut a, mut b, mut c) = arrays?;
    if let Some((index, got, want)) = check_pass(
        cfg.kernel,
        cfg.scalar,
        cfg.stride,
        a.as_mut_slice(),
        b.as_mut_slice(),
        c.as_mut_slice(),
    ) {
        return Err(ProbeError::Verification { thread: t, index, got, want });
    }
    let best = *times.iter().min().expect("at least one repetition");
    let mean = times.iter().sum::<u64>() / times.len() as u64;
    let touched = touched(n, cfg.stride);
    let bytes = useful_bytes(cfg.kernel, n, cfg.stride);
    Ok(ThreadResult {
        thread: t,
        node,
        memory_node,
        elements: n,
        touched,
        useful_bytes: bytes,
        best_ns: best,
        mean_ns: mean,
        mb_per_s: mb_per_s(bytes, best),
        latency_ns: best as f64 / touched as f64,
    })
}

/// The thread-count x placement x stride matrix, for every kernel listed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ProbeConfig,
    pub kernels: Vec<Kernel>,
    pub threads: Vec<usize>,
    pub placements: Vec<Placement>,
    pub strides: Vec<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            base: ProbeConfig::default(),
            kernels: vec![Kernel::Triad],
            threads: vec![1],
            placements: vec![Placement::NumaAware, Placement::CrossNode],
            strides: vec![1, 8],
        }
    }
}

impl SweepSpec {
    pub fn configs(&self) -> Vec<ProbeConfig> {
        let mut out = Vec::new();
        for &kernel in &self.kernels {
            for &placement in &self.placements {
                for &threads in &self.threads {
                    for &stride in &self.strides {
                        out.push(ProbeConfig {
                            kernel,
                            threads,
                            stride,
                            placement,
                            ..self.base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// One CSV row; failed configurations keep their coordinates and an error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kernel: Kernel,
    pub threads: usize,
    pub nodes_active: usize,
    pub stride: usize,
    pub placement: Placement,
    pub mb_per_s: Option<f64>,
    pub mb_per_s_per_node: Option<f64>,
    pub latency_ns: Option<f64>,
    pub simulated: bool,
    pub error: String,
}

impl SweepRow {
    fn new(cfg: &ProbeConfig, r: Result<ProbeResult>) -> Self {
        let mut row = SweepRow {
            kernel: cfg.kernel,
            threads: cfg.threads,
            nodes_active: cfg.threads.min(cfg.nodes),
            stride: cfg.stride,
            placement: cfg.placement,
            mb_per_s: None,
            mb_per_s_per_node: None,
            latency_ns: None,
            simulated: cfg.numa == NumaMode::Simulated,
            error: String::new(),
        };
        match r {
            Ok(r) => {
                row.nodes_active = r.nodes_active;
                row.mb_per_s = Some(r.mb_per_s);
                row.mb_per_s_per_node = Some(r.mb_per_s_per_node);
                row.latency_ns = Some(r.latency_ns);
                row.simulated = r.simulated;
            }
            Err(e) => row.error = e.to_string(),
        }
        row
    }
}

pub fn sweep(spec: &SweepSpec) -> Vec<SweepRow> {
    spec.configs()
        .iter()
        .map(|cfg| {
            let r = run_kernel(cfg);
            if let Err(e) = &r {
                log::warn!("{} x{} stride {}: {e}", cfg.kernel.name(), cfg.threads, cfg.stride);
            }
            SweepRow::new(cfg, r)
        })
        .collect()
}

pub fn write_csv(rows: &[SweepRow], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_example() {
        let (b, c) = ([1.0, 2.0, 3.0], [0.0; 3]);
        let mut a = [SENTINEL; 3];
        run_pass(Kernel::Copy, 0.0, 1, &mut a, &b, &c);
        assert_eq!(a, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn triad_example() {
        let mut a = [0.0; 2];
        run_pass(Kernel::Triad, 2.0, 1, &mut a, &[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(a, [7.0, 10.0]);
    }

    #[test]
    fn stride_eight_touches_one_element_per_line() {
        assert_eq!(touched(1024, 8), 128);
        assert_eq!(useful_bytes(Kernel::Copy, 1024, 8), 2 * 128 * 8);
        assert_eq!(touched(1025, 8), 129);
    }

    #[test]
    fn sysfs_sizes() {
        assert_eq!(parse_size("32768K"), Some(32 << 20));
        assert_eq!(parse_size("2M"), Some(2 << 20));
        assert_eq!(parse_size("512"), Some(512));
        assert_eq!(parse_size("x"), None);
    }
}
