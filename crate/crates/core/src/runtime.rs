//! Shared runtime state: arenas, chunk manager, topology, controller.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::chunk::{ChunkManager, WorkerId};
use crate::error::{GcError, Result};
use crate::local::{AllocationWindow, LocalHeap};
use crate::memory::Memory;
use crate::object::{DescriptorTable, Reference, WORD_BYTES};
use crate::protocol::{BalanceMode, GcController};
use crate::topology::{NodeId, NumaMode, PlacementPolicy, Topology};
use crate::worker::Worker;

pub const KIB: usize = 1024;
pub const MIB: usize = 1024 * KIB;
pub const GIB: usize = 1024 * MIB;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub workers: usize,
    pub local_heap_bytes: usize,
    pub chunk_bytes: usize,
    pub global_trigger_bytes_per_worker: usize,
    pub major_threshold_fraction: f64,
    pub placement: PlacementPolicy,
    pub balance: BalanceMode,
    pub nodes: usize,
    pub cores_per_node: usize,
    pub numa: NumaMode,
    /// Address space reserved for global chunks.
    pub global_arena_bytes: usize,
    pub trace_chunks: bool,
    /// Check oracle snapshots and sweeps around every collection.
    pub verify: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            workers: 4,
            local_heap_bytes: 512 * KIB,
            chunk_bytes: 256 * KIB,
            global_trigger_bytes_per_worker: 32 * MIB,
            major_threshold_fraction: 0.25,
            placement: PlacementPolicy::LocalNode,
            balance: BalanceMode::PerNode,
            nodes: 1,
            cores_per_node: 4,
            numa: NumaMode::Simulated,
            global_arena_bytes: 4 * GIB,
            trace_chunks: false,
            verify: false,
        }
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<()> {
        let sized = [
            ("local_heap_bytes", self.local_heap_bytes),
            ("chunk_bytes", self.chunk_bytes),
            ("global_trigger_bytes_per_worker", self.global_trigger_bytes_per_worker),
            ("global_arena_bytes", self.global_arena_bytes),
        ];
        for (name, v) in sized {
            if v == 0 || v % WORD_BYTES != 0 {
                return Err(GcError::Config(format!(
                    "{name} = {v} must be a positive multiple of {WORD_BYTES}"
                )));
            }
        }
        if self.workers == 0 {
            return Err(GcError::Config("workers must be at least 1".into()));
        }
        if self.nodes == 0 || self.cores_per_node == 0 {
            return Err(GcError::Config("nodes and cores_per_node must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.major_threshold_fraction) {
            return Err(GcError::Config(format!(
                "major_threshold_fraction {} outside [0, 1]",
                self.major_threshold_fraction
            )));
        }
        if self.workers > u16::MAX as usize {
            return Err(GcError::Config("too many workers".into()));
        }
        Ok(())
    }
}

/// Counters and findings of the runtime's self-checks.
#[derive(Debug, Default)]
pub struct Verifier {
    enabled: bool,
    pub(crate) snapshots: AtomicU64,
    pub(crate) sweeps: AtomicU64,
    pub(crate) splits: AtomicU64,
    pub(crate) single_copy: AtomicU64,
    violations: Mutex<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckCounts {
    /// Snapshot pairs compared across a collection or promotion.
    pub snapshot_comparisons: u64,
    pub sweeps: u64,
    pub nursery_splits: u64,
    pub single_copy_checks: u64,
}

impl Verifier {
    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub(crate) fn fail(&self, msg: String) {
        log::error!("{msg}");
        self.violations.lock().push(msg);
    }

    pub fn violations(&self) -> Vec<String> {
        self.violations.lock().clone()
    }

    pub fn counts(&self) -> CheckCounts {
        CheckCounts {
            snapshot_comparisons: self.snapshots.load(Ordering::Relaxed),
            sweeps: self.sweeps.load(Ordering::Relaxed),
            nursery_splits: self.splits.load(Ordering::Relaxed),
            single_copy_checks: self.single_copy.load(Ordering::Relaxed),
        }
    }
}

pub struct Runtime {
    config: RuntimeConfig,
    pub(crate) mem: Memory,
    pub(crate) chunks: ChunkManager,
    pub(crate) topology: Topology,
    pub(crate) table: DescriptorTable,
    pub(crate) controller: GcController,
    pub(crate) verifier: Verifier,
    pub(crate) inboxes: Vec<Mutex<Vec<Reference>>>,
    pub(crate) steal_requests: Vec<Mutex<Vec<WorkerId>>>,
    worker_nodes: Vec<NodeId>,
    workers_taken: AtomicBool,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("config", &self.config)
            .field("chunks", &self.chunks)
            .finish_non_exhaustive()
    }
}

impl Runtime {
    pub fn new(config: RuntimeConfig, table: DescriptorTable) -> Result<Self> {
        let topology = Topology::new(config.nodes, config.cores_per_node, config.numa)?;
        Self::with_topology(config, table, topology)
    }

    pub fn with_topology(
        config: RuntimeConfig,
        table: DescriptorTable,
        topology: Topology,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.workers;
        let mem = Memory::new(n * config.local_heap_bytes, config.global_arena_bytes)?;
        let chunks = ChunkManager::new(
            topology.nodes(),
            config.chunk_bytes,
            mem.global.base(),
            mem.global.len(),
            config.trace_chunks,
        )?;
        let worker_nodes: Vec<NodeId> =
            (0..n).map(|w| topology.assign_worker_node(w, n)).collect();
        let controller = GcController::new(
            n,
            (n as u64) * config.global_trigger_bytes_per_worker as u64,
            config.balance,
            &worker_nodes,
            topology.nodes(),
        );
        Ok(Runtime {
            verifier: Verifier {
                enabled: config.verify,
                ..Verifier::default()
            },
            inboxes: (0..n).map(|_| Mutex::new(Vec::new())).collect(),
            steal_requests: (0..n).map(|_| Mutex::new(Vec::new())).collect(),
            worker_nodes,
            workers_taken: AtomicBool::new(false),
            config,
            mem,
            chunks,
            topology,
            table,
            controller,
        })
    }

    /// Creates the worker contexts. Callable once per runtime.
    pub fn workers(&self) -> Result<Vec<Worker<'_>>> {
        if self.workers_taken.swap(true, Ordering::SeqCst) {
            return Err(GcError::Config("workers already created for this runtime".into()));
        }
        (0..self.config.workers)
            .map(|w| {
                let window = AllocationWindow::new(
                    self.controller.limit_word(w),
                    self.controller.pending_flag(),
                );
                let heap = LocalHeap::new(
                    &self.mem,
                    w,
                    self.local_heap_base(w),
                    self.config.local_heap_bytes,
                    self.config.major_threshold_fraction,
                    window,
                )?;
                Ok(Worker::new(self, w, self.worker_nodes[w], heap))
            })
            .collect()
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }
    pub fn memory(&self) -> &Memory {
        &self.mem
    }
    pub fn chunks(&self) -> &ChunkManager {
        &self.chunks
    }
    pub fn topology(&self) -> &Topology {
        &self.topology
    }
    pub fn table(&self) -> &DescriptorTable {
        &self.table
    }
    pub fn controller(&self) -> &GcController {
        &self.controller
    }
    pub fn verifier(&self) -> &Verifier {
        &self.verifier
    }
    pub fn worker_count(&self) -> usize {
        self.config.workers
    }
    pub fn worker_node(&self, w: WorkerId) -> NodeId {
        self.worker_nodes[w]
    }

    pub fn local_heap_base(&self, w: WorkerId) -> usize {
        self.mem.local.base() + w * self.config.local_heap_bytes
    }

    /// Owner of the local heap containing `addr`, if any.
    #[inline]
    pub fn local_owner(&self, addr: usize) -> Option<WorkerId> {
        if self.mem.local.contains(addr) {
            let w = (addr - self.mem.local.base()) / self.config.local_heap_bytes;
            (w < self.config.workers).then_some(w)
        } else {
            None
        }
    }

    #[inline]
    pub fn is_global(&self, addr: usize) -> bool {
        self.chunks.range().contains(&addr)
    }

    /// Global references waiting in `w`'s inbox.
    pub fn inbox(&self, w: WorkerId) -> Vec<Reference> {
        self.inboxes[w].lock().clone()
    }

    pub(crate) fn deliver(&self, to: WorkerId, r: Reference) {
        debug_assert!(r.is_null() || self.is_global(r.addr()));
        self.inboxes[to].lock().push(r);
    }
}
