//! Synthetic mutators driven by a seeded op stream.
//!
//! Every worker draws ops from its own ChaCha stream, so a spec and seed
//! fix each worker's op sequence. In deterministic mode workers take one
//! op each in round-robin order on the calling thread; in threaded mode
//! each worker runs on its own thread.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use parking_lot::Mutex;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::WorkerId;
use crate::error::{GcError, Result};
use crate::object::{
    encode_header, DescriptorTable, ObjectDescriptor, ObjectKind, Reference,
};
use crate::oracle;
use crate::protocol::{BalanceMode, Collector, GlobalGcStats, SequentialCollector, ThreadedCollector};
use crate::runtime::{CheckCounts, Runtime, RuntimeConfig, KIB};
use crate::topology::PlacementPolicy;
use crate::worker::{Worker, WorkerStats};

/// Cons cell: `[value, car, next]`, pointers in fields 1 and 2.
pub const CONS_ID: u16 = 3;
/// Tree node: `[left, value, tag, right]`, pointers in fields 0 and 3.
pub const TREE_ID: u16 = 4;

/// Descriptors the workload ops allocate with.
pub fn standard_descriptors() -> Vec<ObjectDescriptor> {
    vec![
        ObjectDescriptor::new(CONS_ID, 3, vec![1, 2]).expect("valid"),
        ObjectDescriptor::new(TREE_ID, 4, vec![0, 3]).expect("valid"),
    ]
}

pub fn standard_table() -> DescriptorTable {
    DescriptorTable::new(standard_descriptors()).expect("valid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mix {
    pub alloc_list: f64,
    pub alloc_tree: f64,
    pub drop_root: f64,
    pub steal: f64,
    pub send_message: f64,
    /// In-place writes between local roots. A write is skipped when its
    /// target has left the local heap, which depends on when collections
    /// ran; with a nonzero weight, runs that differ only in collector
    /// settings may diverge.
    pub write_field: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            alloc_list: 4.0,
            alloc_tree: 3.0,
            drop_root: 2.0,
            steal: 1.0,
            send_message: 1.0,
            write_field: 0.0,
        }
    }
}

impl Mix {
    fn weights(&self) -> [f64; 6] {
        [
            self.alloc_list,
            self.alloc_tree,
            self.drop_root,
            self.steal,
            self.send_message,
            self.write_field,
        ]
    }
}

/// Inclusive range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

impl SizeRange {
    pub const fn new(min: usize, max: usize) -> Self {
        SizeRange { min, max }
    }
    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sizes {
    pub list_len: SizeRange,
    pub tree_depth: SizeRange,
    /// Payload words of the raw object hung off each list cell.
    pub raw_words: SizeRange,
}

impl Default for Sizes {
    fn default() -> Self {
        Sizes {
            list_len: SizeRange::new(4, 32),
            tree_depth: SizeRange::new(1, 5),
            raw_words: SizeRange::new(1, 4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub name: String,
    pub seed: u64,
    pub workers: usize,
    pub ops_per_worker: usize,
    /// Per-worker op counts overriding `ops_per_worker`.
    pub op_counts: Option<Vec<usize>>,
    pub mix: Mix,
    pub sizes: Sizes,
    /// Roots kept per worker; the oldest are dropped beyond this.
    pub max_roots: usize,
    /// Per-worker override of `max_roots`.
    pub max_roots_per_worker: Option<Vec<usize>>,
    pub descriptors: Vec<ObjectDescriptor>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            name: "default".into(),
            seed: 0,
            workers: 4,
            ops_per_worker: 1000,
            op_counts: None,
            mix: Mix::default(),
            sizes: Sizes::default(),
            max_roots: 32,
            max_roots_per_worker: None,
            descriptors: standard_descriptors(),
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GcError::Config(m));
        if self.workers == 0 {
            return bad("workload needs at least one worker".into());
        }
        let w = self.mix.weights();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().all(|&x| x == 0.0) {
            return bad(format!("mix weights must be nonnegative and not all zero: {w:?}"));
        }
        for (name, v) in [("op_counts", &self.op_counts), ("max_roots_per_worker", &self.max_roots_per_worker)] {
            if let Some(v) = v {
                if v.len() != self.workers {
                    return bad(format!("{name} has {} entries for {} workers", v.len(), self.workers));
                }
            }
        }
        let s = &self.sizes;
        for (name, r) in [("list_len", s.list_len), ("tree_depth", s.tree_depth), ("raw_words", s.raw_words)] {
            if r.min > r.max {
                return bad(format!("sizes.{name}: min {} > max {}", r.min, r.max));
            }
        }
        if s.raw_words.min == 0 {
            return bad("sizes.raw_words.min must be at least 1".into());
        }
        if s.tree_depth.max > 16 {
            return bad("sizes.tree_depth.max is limited to 16".into());
        }
        let table = self.table()?;
        for (id, fields, ptrs) in [(CONS_ID, 3, [1u32, 2]), (TREE_ID, 4, [0, 3])] {
            match table.get(id) {
                Some(d) if d.field_count == fields && d.pointer_fields == ptrs => {}
                _ => {
                    return bad(format!(
                        "descriptor {id} must have {fields} fields with pointers {ptrs:?}"
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn table(&self) -> Result<DescriptorTable> {
        Ok(DescriptorTable::new(self.descriptors.iter().cloned())?)
    }

    pub fn ops_for(&self, w: WorkerId) -> usize {
        self.op_counts
            .as_ref()
            .map_or(self.ops_per_worker, |c| c[w])
    }

    fn max_roots_for(&self, w: WorkerId) -> usize {
        self.max_roots_per_worker
            .as_ref()
            .map_or(self.max_roots, |c| c[w])
    }

    /// A seeded random workload for property runs: 2 to 8 workers and a
    /// mix that exercises every op.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let workers = rng.gen_range(2..=8);
        WorkloadSpec {
            name: format!("random-{seed}"),
            seed,
            workers,
            ops_per_worker: rng.gen_range(300..=500),
            op_counts: None,
            mix: Mix {
                alloc_list: rng.gen_range(2.0..6.0),
                alloc_tree: rng.gen_range(1.0..4.0),
                drop_root: rng.gen_range(1.0..3.0),
                steal: rng.gen_range(0.2..1.5),
                send_message: rng.gen_range(0.2..1.5),
                write_field: rng.gen_range(0.0..1.5),
            },
            sizes: Sizes {
                list_len: SizeRange::new(2, rng.gen_range(12..=40)),
                tree_depth: SizeRange::new(1, rng.gen_range(3..=6)),
                raw_words: SizeRange::new(1, rng.gen_range(1..=6)),
            },
            max_roots: rng.gen_range(8..=24),
            max_roots_per_worker: None,
            descriptors: standard_descriptors(),
        }
    }

    /// Small heaps that make random workloads run every kind of collection.
    pub fn stress_config(&self) -> RuntimeConfig {
        RuntimeConfig {
            workers: self.workers,
            local_heap_bytes: 16 * KIB,
            chunk_bytes: 4 * KIB,
            global_trigger_bytes_per_worker: 4 * KIB,
            global_arena_bytes: 1 << 30,
            verify: true,
            ..RuntimeConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub alloc_list: u64,
    pub alloc_tree: u64,
    pub drop_root: u64,
    pub steal: u64,
    pub send_message: u64,
    pub write_field: u64,
    /// Field writes skipped because the target was global or raw.
    pub write_field_skipped: u64,
    pub steals_served: u64,
    pub messages_received: u64,
}

impl OpCounts {
    fn add(&mut self, o: &OpCounts) {
        self.alloc_list += o.alloc_list;
        self.alloc_tree += o.alloc_tree;
        self.drop_root += o.drop_root;
        self.steal += o.steal;
        self.send_message += o.send_message;
        self.write_field += o.write_field;
        self.write_field_skipped += o.write_field_skipped;
        self.steals_served += o.steals_served;
        self.messages_received += o.messages_received;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Deterministic,
    Threaded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub workers: usize,
    pub mode: ExecMode,
    pub balance: BalanceMode,
    pub placement: PlacementPolicy,
    pub ops: u64,
    pub op_counts: OpCounts,
    pub minor_gcs: u64,
    pub minor_bytes_copied: u64,
    pub major_gcs: u64,
    pub major_bytes_copied: u64,
    pub major_young_bytes_copied: u64,
    pub promotions: u64,
    pub promoted_bytes: u64,
    pub global_gcs: u64,
    pub global_bytes_copied: u64,
    pub steal_count: u64,
    pub chunks_in_use_bytes: u64,
    pub chunks_mapped_bytes: u64,
    pub per_worker: Vec<WorkerStats>,
    pub collections: Vec<GlobalGcStats>,
    pub checks: CheckCounts,
    pub violations: Vec<String>,
    pub errors: Vec<String>,
    /// Hex FNV-1a checksum of the final live graph.
    pub final_checksum: String,
    pub final_objects: usize,
    pub wall_time_ns: u64,
}

impl RunReport {
    /// Clears every wall-clock field so reports of identical runs compare equal.
    pub fn without_timing(mut self) -> Self {
        self.wall_time_ns = 0;
        for c in &mut self.collections {
            c.wall_time_ns = 0;
        }
        self
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.errors.is_empty()
    }
}

const OP_ALLOC_LIST: usize = 0;
const OP_ALLOC_TREE: usize = 1;
const OP_DROP_ROOT: usize = 2;
const OP_STEAL: usize = 3;
const OP_SEND: usize = 4;
const OP_WRITE: usize = 5;

struct Mutator<'s> {
    spec: &'s WorkloadSpec,
    rng: ChaCha8Rng,
    pick: WeightedIndex<f64>,
    counts: OpCounts,
    max_roots: usize,
}

impl<'s> Mutator<'s> {
    fn new(spec: &'s WorkloadSpec, w: WorkerId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(w as u64 + 1);
        Mutator {
            spec,
            rng,
            pick: WeightedIndex::new(spec.mix.weights()).expect("validated weights"),
            counts: OpCounts::default(),
            max_roots: spec.max_roots_for(w),
        }
    }

    fn trim_roots(&self, w: &mut Worker<'_>) {
        let excess = w.roots().len().saturating_sub(self.max_roots);
        for _ in 0..excess {
            w.roots_mut().remove(0);
        }
    }

    fn step<'rt>(&mut self, w: &mut Worker<'rt>, gc: &mut dyn Collector<'rt>) -> Result<()> {
        self.counts.messages_received += w.receive() as u64;
        self.counts.steals_served += w.service_steals(gc)? as u64;
        match self.pick.sample(&mut self.rng) {
            OP_ALLOC_LIST => {
                self.counts.alloc_list += 1;
                self.alloc_list(w, gc)?;
            }
            OP_ALLOC_TREE => {
                self.counts.alloc_tree += 1;
                let depth = self.spec.sizes.tree_depth.sample(&mut self.rng);
                self.alloc_tree(w, gc, depth)?;
            }
            OP_DROP_ROOT => {
                self.counts.drop_root += 1;
                if !w.roots().is_empty() {
                    let i = self.rng.gen_range(0..w.roots().len());
                    w.roots_mut().remove(i);
                }
            }
            OP_STEAL => {
                self.counts.steal += 1;
                if let Some(victim) = self.other_worker(w) {
                    w.request_steal(victim);
                }
            }
            OP_SEND => {
                self.counts.send_message += 1;
                if !w.roots().is_empty() {
                    let i = self.rng.gen_range(0..w.roots().len());
                    let to = self.other_worker(w).unwrap_or(w.id());
                    w.send(gc, i, to)?;
                }
            }
            OP_WRITE => {
                self.counts.write_field += 1;
                self.write_field(w)?;
            }
            _ => unreachable!(),
        }
        self.trim_roots(w);
        w.safepoint(gc)?;
        Ok(())
    }

    fn other_worker(&mut self, w: &Worker<'_>) -> Option<WorkerId> {
        let n = w.runtime().worker_count();
        if n < 2 {
            return None;
        }
        let k = self.rng.gen_range(0..n - 1);
        Some(if k >= w.id() { k + 1 } else { k })
    }

    /// Builds a list whose cells each carry a raw payload, reserving one
    /// nursery block per run of cells.
    fn alloc_list<'rt>(&mut self, w: &mut Worker<'rt>, gc: &mut dyn Collector<'rt>) -> Result<()> {
        let len = self.spec.sizes.list_len.sample(&mut self.rng);
        let raw_words = self.spec.sizes.raw_words.sample(&mut self.rng);
        let table = w.runtime().table();
        let raw_h = encode_header(ObjectKind::Raw, raw_words as u64, table)?;
        let cons_h = encode_header(ObjectKind::Mixed(CONS_ID), 3, table)?;
        let cell_bytes = raw_h.object_bytes() + cons_h.object_bytes();
        let per_block = (w.heap().size() / 8 / cell_bytes).max(1);
        let slot = w.roots_mut().push(Reference::NULL);
        let mut payload = vec![0u64; raw_words];
        let mut left = len;
        while left > 0 {
            let cells = left.min(per_block);
            let mut block = w.reserve_block(gc, cells * cell_bytes)?;
            let mem = w.runtime().memory();
            let mut head = w.roots().get(slot);
            for _ in 0..cells {
                payload.iter_mut().for_each(|p| *p = self.rng.gen());
                let car = block.place(mem, raw_h, &payload);
                let value = self.rng.gen::<u64>();
                head = block.place(mem, cons_h, &[value, car.raw(), head.raw()]);
            }
            w.roots_mut().set(slot, head);
            left -= cells;
        }
        Ok(())
    }

    /// Builds a complete tree of `depth` levels using the roots as a stack.
    fn alloc_tree<'rt>(
        &mut self,
        w: &mut Worker<'rt>,
        gc: &mut dyn Collector<'rt>,
        depth: usize,
    ) -> Result<()> {
        if depth == 0 {
            w.roots_mut().push(Reference::NULL);
            return Ok(());
        }
        self.alloc_tree(w, gc, depth - 1)?;
        self.alloc_tree(w, gc, depth - 1)?;
        let n = w.roots().len();
        let mut fields = [
            w.roots().get(n - 2).raw(),
            self.rng.gen(),
            depth as u64,
            w.roots().get(n - 1).raw(),
        ];
        let node = w.alloc(gc, ObjectKind::Mixed(TREE_ID), &mut fields)?;
        w.roots_mut().truncate(n - 2);
        w.roots_mut().push(node);
        Ok(())
    }

    /// Points a pointer field of one local root at another root.
    fn write_field(&mut self, w: &mut Worker<'_>) -> Result<()> {
        let n = w.roots().len();
        if n == 0 {
            self.counts.write_field_skipped += 1;
            return Ok(());
        }
        let target = w.roots().get(self.rng.gen_range(0..n));
        let value = w.roots().get(self.rng.gen_range(0..n));
        let field = self.rng.gen_range(0..2usize);
        if target.is_null() || !w.heap().in_occupied(target.addr()) {
            self.counts.write_field_skipped += 1;
            return Ok(());
        }
        let index = match w.header(target)?.kind() {
            ObjectKind::Mixed(CONS_ID) => 1 + field,
            ObjectKind::Mixed(TREE_ID) => 3 * field,
            _ => {
                self.counts.write_field_skipped += 1;
                return Ok(());
            }
        };
        w.write_field(target, index, value.raw())
    }
}

fn check_spec(spec: &WorkloadSpec, rt: &Runtime) -> Result<()> {
    spec.validate()?;
    if rt.worker_count() != spec.workers {
        return Err(GcError::Config(format!(
            "workload wants {} workers, runtime has {}",
            spec.workers,
            rt.worker_count()
        )));
    }
    Ok(())
}

/// Runs `spec` on `rt` and reports totals, per-collection statistics and
/// self-check results. Op errors end the run and are listed in the report.
pub fn run_workload(spec: &WorkloadSpec, rt: &Runtime, mode: ExecMode) -> Result<RunReport> {
    check_spec(spec, rt)?;
    let mut workers = rt.workers()?;
    let start = Instant::now();
    let (counts, errors) = match mode {
        ExecMode::Deterministic => run_deterministic(spec, &mut workers),
        ExecMode::Threaded => run_threaded(spec, &mut workers),
    };
    let wall = start.elapsed().as_nanos() as u64;
    Ok(report(spec, rt, mode, &workers, counts, errors, wall))
}

fn run_deterministic(spec: &WorkloadSpec, workers: &mut [Worker<'_>]) -> (OpCounts, Vec<String>) {
    let n = workers.len();
    let mut muts: Vec<Mutator> = (0..n).map(|w| Mutator::new(spec, w)).collect();
    let mut remaining: Vec<usize> = (0..n).map(|w| spec.ops_for(w)).collect();
    let mut errors = Vec::new();
    'outer: loop {
        let mut any = false;
        for i in 0..n {
            if remaining[i] == 0 {
                continue;
            }
            any = true;
            remaining[i] -= 1;
            let (me, mut gc) = SequentialCollector::around(workers, i);
            if let Err(e) = muts[i].step(me, &mut gc) {
                errors.push(format!("worker {i}: {e}"));
                break 'outer;
            }
        }
        if !any {
            break;
        }
    }
    let mut total = OpCounts::default();
    muts.iter().for_each(|m| total.add(&m.counts));
    (total, errors)
}

fn run_threaded(spec: &WorkloadSpec, workers: &mut [Worker<'_>]) -> (OpCounts, Vec<String>) {
    let n = workers.len();
    let finished = AtomicUsize::new(0);
    let errors = Mutex::new(Vec::new());
    let total = Mutex::new(OpCounts::default());
    std::thread::scope(|s| {
        for w in workers.iter_mut() {
            let (finished, errors, total) = (&finished, &errors, &total);
            s.spawn(move || {
                let rt = w.runtime();
                let mut gc = ThreadedCollector;
                if let Err(e) = rt.topology().pin_current_thread(w.node()) {
                    log::warn!("worker {}: {e}", w.id());
                }
                let mut m = Mutator::new(spec, w.id());
                for _ in 0..spec.ops_for(w.id()) {
                    if let Err(e) = m.step(w, &mut gc) {
                        errors.lock().push(format!("worker {}: {e}", w.id()));
                        break;
                    }
                }
                // Keep answering collections until every worker is done.
                let mut done = false;
                loop {
                    if rt.controller().pending() {
                        if let Err(e) = w.safepoint(&mut gc) {
                            errors.lock().push(format!("worker {}: {e}", w.id()));
                        }
                        continue;
                    }
                    if !done {
                        finished.fetch_add(1, Ordering::SeqCst);
                        done = true;
                    }
                    if finished.load(Ordering::SeqCst) == n && !rt.controller().pending() {
                        break;
                    }
                    std::thread::yield_now();
                }
                total.lock().add(&m.counts);
            });
        }
    });
    (total.into_inner(), errors.into_inner())
}

fn report(
    spec: &WorkloadSpec,
    rt: &Runtime,
    mode: ExecMode,
    workers: &[Worker<'_>],
    op_counts: OpCounts,
    errors: Vec<String>,
    wall_time_ns: u64,
) -> RunReport {
    let views: Vec<&Worker> = workers.iter().collect();
    if rt.verifier().enabled() {
        for v in oracle::sweep_all(rt, &views) {
            rt.verifier().fail(format!("at end of run: {v}"));
        }
    }
    let (final_checksum, final_objects) = match oracle::snapshot_all(rt, &views) {
        Ok(s) => (format!("{:016x}", s.checksum()), s.objects().len()),
        Err(d) => {
            rt.verifier().fail(format!("invalid final graph: {d}"));
            (String::new(), 0)
        }
    };
    let per_worker: Vec<WorkerStats> = workers.iter().map(|w| w.stats().clone()).collect();
    let sum = |f: fn(&WorkerStats) -> u64| per_worker.iter().map(f).sum::<u64>();
    let collections = rt.controller().collections();
    RunReport {
        name: spec.name.clone(),
        seed: spec.seed,
        workers: spec.workers,
        mode,
        balance: rt.controller().balance_mode(),
        placement: rt.config().placement,
        ops: (0..spec.workers).map(|w| spec.ops_for(w) as u64).sum(),
        op_counts,
        minor_gcs: sum(|s| s.minor_gcs),
        minor_bytes_copied: sum(|s| s.minor_bytes_copied),
        major_gcs: sum(|s| s.major_gcs),
        major_bytes_copied: sum(|s| s.major_bytes_copied),
        major_young_bytes_copied: sum(|s| s.major_young_bytes_copied),
        promotions: sum(|s| s.promotions),
        promoted_bytes: sum(|s| s.promoted_bytes),
        global_gcs: collections.len() as u64,
        global_bytes_copied: collections.iter().map(|c| c.bytes_live_copied).sum(),
        steal_count: collections.iter().map(|c| c.steal_count).sum(),
        chunks_in_use_bytes: rt.chunks().in_use_bytes(),
        chunks_mapped_bytes: rt.chunks().mapped_bytes(),
        per_worker,
        collections,
        checks: rt.verifier().counts(),
        violations: rt.verifier().violations(),
        errors,
        final_checksum,
        final_objects,
        wall_time_ns,
    }
}
