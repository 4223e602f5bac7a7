//! Stop-the-world parallel global collection.
//!
//! A collection is triggered when the bytes held by in-use chunks exceed
//! `workers * threshold`. The trigger winner becomes leader and zeroes every
//! worker's allocation limit. Each worker, at its next safepoint, empties
//! its local heap (minor then major), after which all chunks become
//! from-space and the workers Cheney-copy everything reachable from their
//! roots into fresh to-space chunks. Full to-space chunks that still need
//! scanning go on the list of their node; under [`BalanceMode::PerNode`]
//! any worker of that node may scan them.
//!
//! Scan termination uses one word: `active << 32 | queued`, where `queued`
//! counts chunks pushed but not yet popped. A push increments `queued`
//! before the chunk is visible and a pop decrements it after, so the word
//! is zero only when no worker is scanning and no chunk is waiting.

use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::chunk::{ChunkId, ChunkState, WorkerId};
use crate::error::{GcError, Result};
use crate::object::{HeaderWord, ObjectHeader, Reference, WORD_BYTES};
use crate::local::LocalHeap;
use crate::oracle::{self, GraphSnapshot};
use crate::runtime::Runtime;
use crate::topology::NodeId;
use crate::worker::Worker;

/// Objects scanned per scheduling unit.
const SCAN_UNIT: usize = 128;

const ACTIVE_ONE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BalanceMode {
    /// Workers scan unscanned chunks produced by anyone on their node.
    #[default]
    #[serde(rename = "node")]
    PerNode,
    /// Workers scan only their own production.
    #[serde(rename = "none")]
    None,
}

impl FromStr for BalanceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "node" => Ok(BalanceMode::PerNode),
            "none" => Ok(BalanceMode::None),
            _ => Err(format!("unknown balance mode {s:?} (expected node|none)")),
        }
    }
}

impl BalanceMode {
    fn pack(self) -> u8 {
        match self {
            BalanceMode::PerNode => 0,
            BalanceMode::None => 1,
        }
    }
    fn unpack(v: u8) -> Self {
        if v == 0 {
            BalanceMode::PerNode
        } else {
            BalanceMode::None
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalGcStats {
    pub index: u64,
    pub leader: WorkerId,
    pub workers: usize,
    pub balance: BalanceMode,
    pub bytes_live_copied: u64,
    pub objects_copied: u64,
    /// To-space chunks finished plus from-space chunks released, per worker.
    pub chunks_scanned: Vec<u64>,
    pub from_space_chunks: u64,
    pub to_space_chunks: u64,
    pub steal_count: u64,
    pub wall_time_ns: u64,
}

/// Entry point into a global collection from a safepoint.
pub trait Collector<'rt> {
    fn global_gc(&mut self, me: &mut Worker<'rt>) -> Result<()>;
}

/// Per-worker state during a global collection.
#[derive(Debug, Default)]
pub(crate) struct GcScratch {
    to_chunk: Option<ChunkId>,
    scanning: Option<ChunkId>,
    bytes: u64,
    objects: u64,
    chunks_scanned: u64,
    from_space: u64,
    to_space_chunks: u64,
    steals: u64,
}

pub struct GcController {
    workers: usize,
    trigger_bytes: u64,
    pending: Arc<AtomicBool>,
    in_progress: AtomicBool,
    leader: AtomicUsize,
    limits: Vec<Arc<AtomicUsize>>,
    balance: AtomicU8,
    active_balance: AtomicU8,
    barrier: Barrier,
    parked: Vec<AtomicUsize>,
    term: AtomicU64,
    unscanned: Vec<Mutex<Vec<(ChunkId, WorkerId)>>>,
    from_space: Vec<Mutex<Vec<ChunkId>>>,
    /// Nodes whose lists each worker serves: its own plus workerless ones.
    scan_nodes: Vec<Vec<NodeId>>,
    stats: Mutex<Vec<GlobalGcStats>>,
    started: Mutex<Option<Instant>>,
    pre_snapshot: Mutex<Option<GraphSnapshot>>,
    failure: Mutex<Option<String>>,
}

impl std::fmt::Debug for GcController {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GcController")
            .field("workers", &self.workers)
            .field("trigger_bytes", &self.trigger_bytes)
            .field("pending", &self.pending())
            .field("in_progress", &self.in_progress())
            .finish_non_exhaustive()
    }
}

impl GcController {
    pub fn new(
        workers: usize,
        trigger_bytes: u64,
        balance: BalanceMode,
        worker_nodes: &[NodeId],
        nodes: usize,
    ) -> Self {
        let mut scan_nodes: Vec<Vec<NodeId>> = (0..workers).map(|w| vec![worker_nodes[w]]).collect();
        for n in 0..nodes {
            if !worker_nodes.contains(&n) {
                scan_nodes[n % workers].push(n);
            }
        }
        GcController {
            workers,
            trigger_bytes,
            pending: Arc::new(AtomicBool::new(false)),
            in_progress: AtomicBool::new(false),
            leader: AtomicUsize::new(0),
            limits: (0..workers).map(|_| Arc::new(AtomicUsize::new(0))).collect(),
            balance: AtomicU8::new(balance.pack()),
            active_balance: AtomicU8::new(balance.pack()),
            barrier: Barrier::new(workers),
            parked: (0..workers).map(|_| AtomicUsize::new(0)).collect(),
            term: AtomicU64::new(0),
            unscanned: (0..nodes).map(|_| Mutex::new(Vec::new())).collect(),
            from_space: (0..nodes).map(|_| Mutex::new(Vec::new())).collect(),
            scan_nodes,
            stats: Mutex::new(Vec::new()),
            started: Mutex::new(None),
            pre_snapshot: Mutex::new(None),
            failure: Mutex::new(None),
        }
    }

    pub(crate) fn limit_word(&self, w: WorkerId) -> Arc<AtomicUsize> {
        self.limits[w].clone()
    }
    pub(crate) fn pending_flag(&self) -> Arc<AtomicBool> {
        self.pending.clone()
    }

    pub fn pending(&self) -> bool {
        self.pending.load(Ordering::SeqCst)
    }
    pub fn in_progress(&self) -> bool {
        self.in_progress.load(Ordering::SeqCst)
    }
    pub fn leader(&self) -> WorkerId {
        self.leader.load(Ordering::SeqCst)
    }
    pub fn trigger_bytes(&self) -> u64 {
        self.trigger_bytes
    }
    /// Published allocation limit of worker `w`; 0 requests a collection.
    pub fn limit(&self, w: WorkerId) -> usize {
        self.limits[w].load(Ordering::SeqCst)
    }

    /// Sets `pending` if `allocated` exceeds the trigger. At most one
    /// caller per collection sees `true`.
    pub fn maybe_trigger(&self, allocated: u64) -> bool {
        if self.in_progress() || allocated <= self.trigger_bytes {
            return false;
        }
        self.pending
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    }

    /// Leader steps after winning the trigger.
    fn begin(&self, leader: WorkerId) {
        self.leader.store(leader, Ordering::SeqCst);
        self.in_progress.store(true, Ordering::SeqCst);
        self.signal_all();
    }

    /// Zeroes every worker's allocation limit.
    pub fn signal_all(&self) {
        for l in &self.limits {
            l.store(0, Ordering::SeqCst);
        }
    }

    pub(crate) fn on_fresh_chunk(&self, rt: &Runtime, w: WorkerId) {
        if self.maybe_trigger(rt.chunks.in_use_bytes()) {
            log::debug!("worker {w} triggered a global collection");
            self.begin(w);
        }
    }

    /// Requests a collection regardless of heap size.
    pub(crate) fn request(&self, _rt: &Runtime, w: WorkerId) -> bool {
        if self.in_progress() {
            return false;
        }
        let won = self
            .pending
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok();
        if won {
            self.begin(w);
        }
        won
    }

    pub fn set_balance_mode(&self, mode: BalanceMode) -> Result<()> {
        if self.in_progress() {
            return Err(GcError::CollectionInProgress);
        }
        self.balance.store(mode.pack(), Ordering::SeqCst);
        Ok(())
    }

    pub fn balance_mode(&self) -> BalanceMode {
        BalanceMode::unpack(self.balance.load(Ordering::SeqCst))
    }

    fn active_balance(&self) -> BalanceMode {
        BalanceMode::unpack(self.active_balance.load(Ordering::Relaxed))
    }

    /// Statistics of every completed global collection.
    pub fn collections(&self) -> Vec<GlobalGcStats> {
        self.stats.lock().clone()
    }

    pub fn collection_count(&self) -> usize {
        self.stats.lock().len()
    }

    fn push_unscanned(&self, node: NodeId, chunk: ChunkId, producer: WorkerId) {
        self.term.fetch_add(1, Ordering::SeqCst);
        self.unscanned[node].lock().push((chunk, producer));
    }

    fn pop_unscanned(&self, w: WorkerId) -> Option<(ChunkId, WorkerId)> {
        let got = match self.active_balance() {
            BalanceMode::PerNode => self.scan_nodes[w]
                .iter()
                .find_map(|&n| self.unscanned[n].lock().pop()),
            BalanceMode::None => self.unscanned.iter().find_map(|l| {
                let mut l = l.lock();
                let i = l.iter().rposition(|&(_, p)| p == w)?;
                Some(l.swap_remove(i))
            }),
        };
        if got.is_some() {
            self.term.fetch_sub(1, Ordering::SeqCst);
        }
        got
    }

    fn has_unscanned(&self, w: WorkerId) -> bool {
        match self.active_balance() {
            BalanceMode::PerNode => self.scan_nodes[w]
                .iter()
                .any(|&n| !self.unscanned[n].lock().is_empty()),
            BalanceMode::None => self
                .unscanned
                .iter()
                .any(|l| l.lock().iter().any(|&(_, p)| p == w)),
        }
    }

    fn record_failure(&self, e: &GcError) {
        let mut f = self.failure.lock();
        if f.is_none() {
            *f = Some(e.to_string());
        }
    }
}

// Leader steps. `workers` is indexed by worker id; everyone else is parked.

fn leader_begin(rt: &Runtime, workers: &[&Worker<'_>]) {
    let ctl = &rt.controller;
    *ctl.started.lock() = Some(Instant::now());
    ctl.active_balance
        .store(ctl.balance.load(Ordering::SeqCst), Ordering::Relaxed);
    if rt.verifier.enabled() {
        let snap = full_snapshot(rt, workers, "before global collection");
        full_sweep(rt, workers, "before global collection");
        *ctl.pre_snapshot.lock() = snap;
    }
    for (node, ids) in rt.chunks.take_in_use().into_iter().enumerate() {
        *ctl.from_space[node].lock() = ids;
    }
    ctl.term
        .store((workers.len() as u64) * ACTIVE_ONE, Ordering::SeqCst);
}

fn leader_end(rt: &Runtime, workers: &[&Worker<'_>]) {
    let ctl = &rt.controller;
    for id in rt.chunks.in_use_chunks() {
        let c = rt.chunks.chunk(id);
        if c.state() == ChunkState::ToSpaceScanned {
            c.set_state(ChunkState::Filled);
        }
    }
    if rt.verifier.enabled() {
        let pre = ctl.pre_snapshot.lock().take();
        let post = full_snapshot(rt, workers, "after global collection");
        full_sweep(rt, workers, "after global collection");
        if let (Some(pre), Some(post)) = (pre, post) {
            check_global_gc(rt, workers, &pre, &post);
        }
    }
    let mut stats = GlobalGcStats {
        index: ctl.stats.lock().len() as u64,
        leader: ctl.leader(),
        workers: workers.len(),
        balance: ctl.active_balance(),
        wall_time_ns: ctl
            .started
            .lock()
            .take()
            .map(|t| t.elapsed().as_nanos() as u64)
            .unwrap_or(0),
        ..GlobalGcStats::default()
    };
    for w in workers {
        stats.bytes_live_copied += w.gc.bytes;
        stats.objects_copied += w.gc.objects;
        stats.chunks_scanned.push(w.gc.chunks_scanned);
        stats.from_space_chunks += w.gc.from_space;
        stats.to_space_chunks += w.gc.to_space_chunks;
        stats.steal_count += w.gc.steals;
    }
    ctl.stats.lock().push(stats);
    ctl.pending.store(false, Ordering::SeqCst);
    ctl.in_progress.store(false, Ordering::SeqCst);
}

/// Roots of every worker in id order, each followed by its inbox.
pub(crate) fn all_roots(rt: &Runtime, workers: &[&Worker<'_>]) -> Vec<Reference> {
    let mut roots = Vec::new();
    for w in workers {
        roots.extend_from_slice(w.roots.as_slice());
        roots.extend(rt.inboxes[w.id()].lock().iter().copied());
    }
    roots
}

fn full_snapshot(rt: &Runtime, workers: &[&Worker<'_>], when: &str) -> Option<GraphSnapshot> {
    let heaps: Vec<&LocalHeap> = workers.iter().map(|w| &w.heap).collect();
    match oracle::snapshot(rt, &all_roots(rt, workers), &heaps) {
        Ok(s) => Some(s),
        Err(d) => {
            rt.verifier.fail(format!("invalid graph {when}: {d}"));
            None
        }
    }
}

fn full_sweep(rt: &Runtime, workers: &[&Worker<'_>], when: &str) {
    let heaps: Vec<&LocalHeap> = workers.iter().map(|w| &w.heap).collect();
    let roots: Vec<&[Reference]> = workers.iter().map(|w| w.roots.as_slice()).collect();
    rt.verifier.sweeps.fetch_add(1, Ordering::Relaxed);
    for v in oracle::sweep_check(rt, &heaps, &roots) {
        rt.verifier.fail(format!("{when}: {v}"));
    }
}

/// Graph preserved, and every global object forwarded to exactly one copy.
fn check_global_gc(rt: &Runtime, workers: &[&Worker<'_>], pre: &GraphSnapshot, post: &GraphSnapshot) {
    let v = &rt.verifier;
    v.snapshots.fetch_add(1, Ordering::Relaxed);
    if pre.checksum() != post.checksum() || pre.objects() != post.objects() {
        v.fail(format!(
            "global collection changed the graph: {:016x} -> {:016x}",
            pre.checksum(),
            post.checksum()
        ));
        return;
    }
    v.single_copy.fetch_add(1, Ordering::Relaxed);
    for (i, (&before, &after)) in pre.addresses().iter().zip(post.addresses()).enumerate() {
        if !rt.is_global(before) {
            if before != after {
                v.fail(format!("local object {i} moved during global collection"));
            }
            continue;
        }
        let fw = rt.mem.load(before - WORD_BYTES);
        if fw != after as u64 {
            v.fail(format!(
                "object {i} at {before:#x}: forwarding word {fw:#x}, copy at {after:#x}"
            ));
        }
    }
    // Every pointer slot in a local heap is a root, reachable or not.
    let mut roots = all_roots(rt, workers);
    for w in workers {
        let h = &w.heap;
        for (lo, hi) in [(h.old_base, h.old_top), (h.nursery_base, h.nursery_top)] {
            let r = LocalHeap::walk_pointer_slots(&rt.mem, &rt.table, lo, hi, |s| {
                roots.push(Reference::from_raw(rt.mem.load(s)))
            });
            if let Err(e) = r {
                v.fail(format!("local heap {} after global collection: {e}", w.id()));
                return;
            }
        }
    }
    let heaps: Vec<&LocalHeap> = workers.iter().map(|w| &w.heap).collect();
    let live_global = match oracle::snapshot(rt, &roots, &heaps) {
        Ok(s) => s.addresses().iter().filter(|&&a| rt.is_global(a)).count(),
        Err(d) => {
            v.fail(format!("invalid local-heap graph after global collection: {d}"));
            return;
        }
    };
    let mut copies = 0usize;
    for id in rt.chunks.in_use_chunks() {
        let c = rt.chunks.chunk(id);
        let mut a = c.base();
        while a < c.top() {
            let h = ObjectHeader::from_word_unchecked(rt.mem.load(a));
            copies += 1;
            a += h.object_bytes();
        }
    }
    if copies != live_global {
        v.fail(format!(
            "{copies} objects in to-space for {live_global} live global objects"
        ));
    }
}

impl<'rt> Worker<'rt> {
    /// Empties the local heap of everything but young data.
    fn gc_local_phase(&mut self) -> Result<()> {
        self.stats.global_gcs += 1;
        self.minor_gc()?;
        self.major_gc()?;
        Ok(())
    }

    fn gc_roots_phase(&mut self) -> Result<()> {
        self.gc = GcScratch::default();
        self.current_chunk = None;
        self.new_to_chunk()?;
        let rt = self.rt;
        for i in 0..self.roots.len() {
            let v = self.roots.get(i).raw();
            let n = self.forward_global(v)?;
            self.roots.set(i, Reference::from_raw(n));
        }
        let inbox: Vec<Reference> = rt.inboxes[self.id()].lock().clone();
        let mut moved = Vec::with_capacity(inbox.len());
        for r in inbox {
            moved.push(Reference::from_raw(self.forward_global(r.raw())?));
        }
        *rt.inboxes[self.id()].lock() = moved;
        let mut slots = Vec::new();
        LocalHeap::walk_pointer_slots(&rt.mem, &rt.table, self.heap.old_base, self.heap.old_top, |s| {
            slots.push(s)
        })?;
        LocalHeap::walk_pointer_slots(
            &rt.mem,
            &rt.table,
            self.heap.nursery_base,
            self.heap.nursery_top,
            |s| slots.push(s),
        )?;
        for s in slots {
            let v = rt.mem.load(s);
            let n = self.forward_global(v)?;
            if n != v {
                rt.mem.store(s, n);
            }
        }
        Ok(())
    }

    fn new_to_chunk(&mut self) -> Result<ChunkId> {
        let rt = self.rt;
        let acq = rt
            .chunks
            .get_chunk(&rt.topology, rt.config().placement, self.node(), self.id())?;
        rt.chunks.chunk(acq.chunk).set_state(ChunkState::ToSpaceUnscanned);
        self.stats.chunks_acquired += 1;
        self.stats.chunk_nodes[acq.node] += 1;
        if acq.fresh {
            self.stats.fresh_chunks += 1;
        }
        self.gc.to_space_chunks += 1;
        self.gc.to_chunk = Some(acq.chunk);
        Ok(acq.chunk)
    }

    /// Hands a full to-space chunk to the scan lists, or marks it done.
    fn retire_to_chunk(&mut self, id: ChunkId) {
        let c = self.rt.chunks.chunk(id);
        if c.scan() < c.top() {
            self.rt.controller.push_unscanned(c.node(), id, self.id());
        } else {
            c.set_state(ChunkState::ToSpaceScanned);
            self.gc.chunks_scanned += 1;
        }
    }

    fn tospace_alloc(&mut self, bytes: usize) -> Result<usize> {
        if let Some(id) = self.gc.to_chunk {
            if let Some(a) = self.rt.chunks.chunk(id).try_bump(bytes) {
                return Ok(a);
            }
            self.retire_to_chunk(id);
        }
        let id = self.new_to_chunk()?;
        self.rt
            .chunks
            .chunk(id)
            .try_bump(bytes)
            .ok_or(GcError::ObjectTooLarge {
                bytes,
                limit: self.rt.chunks.chunk_bytes(),
            })
    }

    /// Copies a from-space object to this worker's to-space chunk, or
    /// returns the copy another worker already installed.
    fn forward_global(&mut self, v: u64) -> Result<u64> {
        let r = Reference::from_raw(v);
        if r.is_null() {
            return Ok(v);
        }
        let rt = self.rt;
        match rt.chunks.chunk_of(r.addr()) {
            Some(c) if c.state() == ChunkState::FromSpace => {}
            _ => return Ok(v),
        }
        let hdr = r.header_addr();
        let word = rt.mem.load_acquire(hdr);
        let h = match HeaderWord::classify(word) {
            HeaderWord::Forwarded(to) => return Ok(to.raw()),
            HeaderWord::Object(h) => h,
        };
        let bytes = h.object_bytes();
        let dst = self.tospace_alloc(bytes)?;
        rt.mem.copy_words(hdr, dst, bytes / WORD_BYTES);
        let to = Reference::from_addr(dst + WORD_BYTES);
        match rt.mem.compare_exchange(hdr, word, to.raw()) {
            Ok(_) => {
                self.gc.bytes += bytes as u64;
                self.gc.objects += 1;
                Ok(to.raw())
            }
            Err(now) => {
                let id = self.gc.to_chunk.expect("copy went to the current to-space chunk");
                rt.chunks.chunk(id).unbump(dst);
                match HeaderWord::classify(now) {
                    HeaderWord::Forwarded(winner) => Ok(winner.raw()),
                    HeaderWord::Object(_) => Err(GcError::Invariant(format!(
                        "header at {hdr:#x} changed to another header during collection"
                    ))),
                }
            }
        }
    }

    /// Scans up to `max` objects of chunk `id` from its scan cursor.
    fn scan_objects(&mut self, id: ChunkId, max: usize) -> Result<()> {
        let rt = self.rt;
        let mut slots = Vec::new();
        for _ in 0..max {
            let c = rt.chunks.chunk(id);
            let s = c.scan();
            if s >= c.top() {
                break;
            }
            let h = ObjectHeader::from_word_unchecked(rt.mem.load(s));
            // Advance first so a hand-off of this chunk never rescans `s`.
            c.set_scan(s + h.object_bytes());
            slots.clear();
            rt.table
                .for_each_pointer_field(h, |i| slots.push(s + (i + 1) * WORD_BYTES))?;
            for &slot in &slots {
                let v = rt.mem.load(slot);
                let n = self.forward_global(v)?;
                if n != v {
                    rt.mem.store(slot, n);
                }
            }
        }
        Ok(())
    }

    /// One unit of scan work; `false` when none was available.
    fn scan_unit(&mut self) -> Result<bool> {
        let rt = self.rt;
        if let Some(id) = self.gc.scanning {
            self.scan_objects(id, SCAN_UNIT)?;
            let c = rt.chunks.chunk(id);
            if c.scan() >= c.top() {
                c.set_state(ChunkState::ToSpaceScanned);
                self.gc.chunks_scanned += 1;
                self.gc.scanning = None;
            }
            return Ok(true);
        }
        if let Some(id) = self.gc.to_chunk {
            let c = rt.chunks.chunk(id);
            if c.scan() < c.top() {
                self.scan_objects(id, SCAN_UNIT)?;
                return Ok(true);
            }
        }
        if let Some((id, producer)) = rt.controller.pop_unscanned(self.id()) {
            if producer != self.id() {
                self.gc.steals += 1;
            }
            self.gc.scanning = Some(id);
            return Ok(true);
        }
        Ok(false)
    }

    fn scan_threaded(&mut self) -> Result<()> {
        let ctl = &self.rt.controller;
        let mut result = Ok(());
        loop {
            if result.is_ok() {
                match self.scan_unit() {
                    Ok(true) => continue,
                    Ok(false) => {}
                    Err(e) => {
                        ctl.record_failure(&e);
                        result = Err(e);
                    }
                }
            }
            ctl.term.fetch_sub(ACTIVE_ONE, Ordering::SeqCst);
            loop {
                let s = ctl.term.load(Ordering::SeqCst);
                if s == 0 {
                    return result;
                }
                if result.is_ok()
                    && ctl.has_unscanned(self.id())
                    && ctl
                        .term
                        .compare_exchange(s, s + ACTIVE_ONE, Ordering::SeqCst, Ordering::SeqCst)
                        .is_ok()
                {
                    break;
                }
                std::thread::yield_now();
            }
        }
    }

    fn finish_scan(&mut self) {
        if let Some(id) = self.gc.to_chunk {
            let c = self.rt.chunks.chunk(id);
            debug_assert!(c.scan() >= c.top());
            c.set_state(ChunkState::ToSpaceScanned);
            self.gc.chunks_scanned += 1;
        }
    }

    fn drain_from_space(&mut self) {
        let rt = self.rt;
        for &node in &rt.controller.scan_nodes[self.id()] {
            loop {
                let Some(id) = rt.controller.from_space[node].lock().pop() else {
                    break;
                };
                rt.chunks.release(id);
                self.gc.from_space += 1;
                self.gc.chunks_scanned += 1;
            }
        }
    }

    fn gc_resume(&mut self) {
        if let Some(id) = self.gc.to_chunk {
            self.rt
                .chunks
                .chunk(id)
                .set_state(ChunkState::Current(self.id()));
            self.current_chunk = Some(id);
        }
        self.heap.restore_limit();
    }
}

/// Collector for worker threads meeting at real barriers.
#[derive(Clone, Copy, Debug, Default)]
pub struct ThreadedCollector;

impl ThreadedCollector {
    fn park(ctl: &GcController, me: &mut Worker<'_>) {
        ctl.parked[me.id()].store(me as *mut Worker<'_> as usize, Ordering::SeqCst);
    }

    /// # Safety
    /// Every worker must have parked and be blocked at a barrier.
    unsafe fn parked<'a, 'rt>(ctl: &GcController) -> Vec<&'a Worker<'rt>> {
        ctl.parked
            .iter()
            .map(|p| unsafe { &*(p.load(Ordering::SeqCst) as *const Worker<'rt>) })
            .collect()
    }
}

impl<'rt> Collector<'rt> for ThreadedCollector {
    fn global_gc(&mut self, me: &mut Worker<'rt>) -> Result<()> {
        let rt = me.rt;
        let ctl = &rt.controller;
        if !ctl.pending() {
            me.heap.restore_limit();
            return Ok(());
        }
        let mut result = me.gc_local_phase();
        if let Err(e) = &result {
            ctl.record_failure(e);
        }
        Self::park(ctl, me);
        ctl.barrier.wait();
        let leader = ctl.leader() == me.id();
        if leader {
            // SAFETY: all workers parked before the barrier and wait at the next one.
            let ws = unsafe { Self::parked(ctl) };
            leader_begin(rt, &ws);
        }
        ctl.barrier.wait();
        match me.gc_roots_phase() {
            Ok(()) => {
                if let Err(e) = me.scan_threaded() {
                    result = result.and(Err(e));
                }
            }
            Err(e) => {
                ctl.record_failure(&e);
                result = result.and(Err(e));
                ctl.term.fetch_sub(ACTIVE_ONE, Ordering::SeqCst);
                while ctl.term.load(Ordering::SeqCst) != 0 {
                    std::thread::yield_now();
                }
            }
        }
        me.finish_scan();
        me.drain_from_space();
        Self::park(ctl, me);
        ctl.barrier.wait();
        if leader {
            // SAFETY: as above.
            let ws = unsafe { Self::parked(ctl) };
            leader_end(rt, &ws);
        }
        ctl.barrier.wait();
        me.gc_resume();
        result?;
        if let Some(f) = ctl.failure.lock().clone() {
            return Err(GcError::Invariant(format!("global collection failed: {f}")));
        }
        Ok(())
    }
}

/// Collector for deterministic single-threaded runs: the calling worker
/// plus the workers before and after it in id order.
pub struct SequentialCollector<'a, 'rt> {
    left: &'a mut [Worker<'rt>],
    right: &'a mut [Worker<'rt>],
}

impl<'a, 'rt> SequentialCollector<'a, 'rt> {
    pub fn new(left: &'a mut [Worker<'rt>], right: &'a mut [Worker<'rt>]) -> Self {
        SequentialCollector { left, right }
    }

    /// For a runtime with a single worker.
    pub fn solo() -> Self {
        SequentialCollector {
            left: &mut [],
            right: &mut [],
        }
    }

    /// Splits `workers` around worker `i`.
    pub fn around(workers: &'a mut [Worker<'rt>], i: usize) -> (&'a mut Worker<'rt>, Self) {
        let (left, rest) = workers.split_at_mut(i);
        let (me, right) = rest.split_first_mut().expect("worker index in range");
        (me, SequentialCollector { left, right })
    }
}

impl<'rt> Collector<'rt> for SequentialCollector<'_, 'rt> {
    fn global_gc(&mut self, me: &mut Worker<'rt>) -> Result<()> {
        let rt = me.rt;
        if !rt.controller.pending() {
            me.heap.restore_limit();
            return Ok(());
        }
        let mut all: Vec<&mut Worker<'rt>> = self
            .left
            .iter_mut()
            .chain(std::iter::once(me))
            .chain(self.right.iter_mut())
            .collect();
        if all.len() != rt.worker_count() || all.iter().enumerate().any(|(i, w)| w.id() != i) {
            return Err(GcError::Config(
                "sequential collection needs every worker in id order".into(),
            ));
        }
        for w in all.iter_mut() {
            w.gc_local_phase()?;
        }
        leader_begin(rt, &all.iter().map(|w| &**w).collect::<Vec<_>>());
        for w in all.iter_mut() {
            w.gc_roots_phase()?;
        }
        loop {
            let mut worked = false;
            for w in all.iter_mut() {
                worked |= w.scan_unit()?;
            }
            if !worked {
                break;
            }
        }
        for w in all.iter_mut() {
            w.finish_scan();
            w.drain_from_space();
        }
        leader_end(rt, &all.iter().map(|w| &**w).collect::<Vec<_>>());
        for w in all.iter_mut() {
            w.gc_resume();
        }
        Ok(())
    }
}
