//! Worker contexts and the mutator-facing API.

use std::sync::atomic::Ordering;

use serde::{Deserialize, Serialize};

use crate::chunk::{Acquired, ChunkId, ChunkState, WorkerId};
use crate::error::{AllocError, GcError, Result};
use crate::local::{Block, LocalHeap, MinorStats, RootSet, expected_nursery_bytes};
use crate::object::{
    encode_header, HeaderWord, ObjectHeader, ObjectKind, Reference, WORD_BYTES,
};
use crate::oracle::{self, GraphSnapshot};
use crate::protocol::{Collector, GcScratch};
use crate::runtime::Runtime;
use crate::topology::NodeId;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerStats {
    pub allocations: u64,
    pub allocated_bytes: u64,
    pub minor_gcs: u64,
    pub minor_bytes_copied: u64,
    pub major_gcs: u64,
    /// Bytes moved to the global heap from the older area.
    pub major_bytes_copied: u64,
    /// Young bytes moved because a global copy referenced them.
    pub major_young_bytes_copied: u64,
    pub promotions: u64,
    pub promoted_bytes: u64,
    pub global_gcs: u64,
    pub chunks_acquired: u64,
    pub fresh_chunks: u64,
    /// Chunks acquired per node.
    pub chunk_nodes: Vec<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MajorStats {
    pub older_bytes_copied: usize,
    pub young_bytes_copied: usize,
    pub objects_copied: usize,
    pub young_bytes_retained: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromotionResult {
    pub global_ref: Reference,
    pub bytes_promoted: usize,
}

/// One worker: a local heap, its roots and its current global chunk.
pub struct Worker<'rt> {
    pub(crate) rt: &'rt Runtime,
    id: WorkerId,
    node: NodeId,
    pub(crate) heap: LocalHeap,
    pub(crate) roots: RootSet,
    pub(crate) current_chunk: Option<ChunkId>,
    pub(crate) stats: WorkerStats,
    pub(crate) gc: GcScratch,
    last_minor: Option<MinorStats>,
}

impl std::fmt::Debug for Worker<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Worker")
            .field("id", &self.id)
            .field("node", &self.node)
            .field("heap", &self.heap)
            .field("roots", &self.roots.len())
            .finish_non_exhaustive()
    }
}

impl<'rt> Worker<'rt> {
    pub(crate) fn new(rt: &'rt Runtime, id: WorkerId, node: NodeId, heap: LocalHeap) -> Self {
        Worker {
            rt,
            id,
            node,
            heap,
            roots: RootSet::new(),
            current_chunk: None,
            stats: WorkerStats {
                chunk_nodes: vec![0; rt.topology().nodes()],
                ..WorkerStats::default()
            },
            gc: GcScratch::default(),
            last_minor: None,
        }
    }

    pub fn id(&self) -> WorkerId {
        self.id
    }
    pub fn node(&self) -> NodeId {
        self.node
    }
    pub fn runtime(&self) -> &'rt Runtime {
        self.rt
    }
    pub fn heap(&self) -> &LocalHeap {
        &self.heap
    }
    pub fn roots(&self) -> &RootSet {
        &self.roots
    }
    pub fn roots_mut(&mut self) -> &mut RootSet {
        &mut self.roots
    }
    pub fn stats(&self) -> &WorkerStats {
        &self.stats
    }
    pub fn current_chunk(&self) -> Option<ChunkId> {
        self.current_chunk
    }
    /// Statistics of the most recent minor collection.
    pub fn last_minor(&self) -> Option<MinorStats> {
        self.last_minor
    }

    #[inline]
    pub fn is_own_local(&self, addr: usize) -> bool {
        self.heap.contains(addr)
    }

    /// Rejects pointer values into other workers' heaps.
    fn check_pointer_value(&self, v: u64) -> Result<()> {
        if v == 0 {
            return Ok(());
        }
        match self.rt.local_owner(v as usize) {
            Some(owner) if owner != self.id => Err(GcError::ForeignPointer {
                value: Reference::from_raw(v),
                owner,
            }),
            _ => Ok(()),
        }
    }

    /// Allocates an object; pointer values in `fields` are kept alive and
    /// updated in place if a collection runs first.
    pub fn alloc(
        &mut self,
        gc: &mut dyn Collector<'rt>,
        kind: ObjectKind,
        fields: &mut [u64],
    ) -> Result<Reference> {
        let header = encode_header(kind, fields.len() as u64, self.rt.table())?;
        let mut ptrs = Vec::new();
        self.rt.table().for_each_pointer_field(header, |i| ptrs.push(i))?;
        for &i in &ptrs {
            self.check_pointer_value(fields[i])?;
        }
        let mut block = self.reserve(gc, header.object_bytes(), fields, &ptrs)?;
        Ok(block.place(&self.rt.mem, header, fields))
    }

    /// Reserves a nursery block for several objects behind one limit test.
    /// Any collection happens before the block is returned, so references
    /// read from the roots afterwards are current.
    pub fn reserve_block(&mut self, gc: &mut dyn Collector<'rt>, total: usize) -> Result<Block> {
        if !total.is_multiple_of(WORD_BYTES) {
            return Err(GcError::Config(format!("block size {total} is not word aligned")));
        }
        self.reserve(gc, total, &mut [], &[])
    }

    fn reserve(
        &mut self,
        gc: &mut dyn Collector<'rt>,
        total: usize,
        fields: &mut [u64],
        ptrs: &[usize],
    ) -> Result<Block> {
        let limit = self.rt.chunks.chunk_bytes();
        if total > limit {
            return Err(GcError::ObjectTooLarge { bytes: total, limit });
        }
        let mut escalations = 0;
        loop {
            let err = match self.heap.alloc_block(total) {
                Ok(b) => {
                    self.stats.allocations += 1;
                    self.stats.allocated_bytes += total as u64;
                    return Ok(b);
                }
                Err(e) => e,
            };
            if escalations == 3 {
                return Err(GcError::LocalHeapExhausted {
                    worker: self.id,
                    bytes: total,
                });
            }
            let mark = self.roots.len();
            for &i in ptrs {
                self.roots.push(Reference::from_raw(fields[i]));
            }
            let res = match err {
                AllocError::GlobalGcRequested => gc.global_gc(self),
                AllocError::MinorGcRequired => {
                    escalations += 1;
                    self.minor_then_maybe_major(escalations > 1)
                }
            };
            for (k, &i) in ptrs.iter().enumerate() {
                fields[i] = self.roots.get(mark + k).raw();
            }
            self.roots.truncate(mark);
            res?;
        }
    }

    fn minor_then_maybe_major(&mut self, force_major: bool) -> Result<()> {
        let s = self.minor_gc()?;
        if s.triggered_major || force_major {
            self.major_gc()?;
        }
        Ok(())
    }

    /// Runs a minor collection over this worker's nursery.
    pub fn minor_gc(&mut self) -> Result<MinorStats> {
        let before = self.local_snapshot(&[]);
        let s = self
            .heap
            .minor_gc(&self.rt.mem, &self.rt.table, &mut self.roots)?;
        self.stats.minor_gcs += 1;
        self.stats.minor_bytes_copied += s.bytes_copied as u64;
        self.last_minor = Some(s);
        if self.rt.verifier.enabled() {
            self.rt.verifier.splits.fetch_add(1, Ordering::Relaxed);
            if s.new_nursery_bytes != expected_nursery_bytes(s.free_bytes) {
                self.rt.verifier.fail(format!(
                    "worker {}: nursery of {} bytes after split of {} free bytes",
                    self.id, s.new_nursery_bytes, s.free_bytes
                ));
            }
            self.verify_local("minor collection", before, &[], &[]);
        }
        Ok(s)
    }

    /// Moves live older data to the global heap. Runs a minor collection
    /// first if the nursery holds anything.
    pub fn major_gc(&mut self) -> Result<MajorStats> {
        if self.heap.nursery_top() != self.heap.nursery_base() {
            self.minor_gc()?;
        }
        let before = self.local_snapshot(&[]);
        let (s, copied) = self.major_gc_inner()?;
        self.stats.major_gcs += 1;
        self.stats.major_bytes_copied += s.older_bytes_copied as u64;
        self.stats.major_young_bytes_copied += s.young_bytes_copied as u64;
        if self.rt.verifier.enabled() {
            self.verify_local("major collection", before, &[], &copied);
        }
        Ok(s)
    }

    /// Copies `r`'s local closure to the global heap.
    pub fn promote(&mut self, gc: &mut dyn Collector<'rt>, r: Reference) -> Result<PromotionResult> {
        let r = if self.rt.controller.pending() {
            let mark = self.roots.push(r);
            let res = gc.global_gc(self);
            let r = self.roots.get(mark);
            self.roots.truncate(mark);
            res?;
            r
        } else {
            r
        };
        if r.is_null() || !self.rt.mem.local.contains(r.addr()) {
            return Ok(PromotionResult {
                global_ref: r,
                bytes_promoted: 0,
            });
        }
        if !self.is_own_local(r.addr()) {
            return Err(GcError::NotLocal(r));
        }
        let before = self.local_snapshot(&[r]);
        let (res, copied) = self.promote_inner(r)?;
        self.stats.promotions += 1;
        self.stats.promoted_bytes += res.bytes_promoted as u64;
        if self.rt.verifier.enabled() {
            self.verify_local("promotion", before, &[res.global_ref], &copied);
        }
        Ok(res)
    }

    /// Enters a pending global collection, if any.
    pub fn safepoint(&mut self, gc: &mut dyn Collector<'rt>) -> Result<bool> {
        if self.rt.controller.pending() {
            gc.global_gc(self)?;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Asks for a global collection; it runs at the next safepoint.
    pub fn request_global_gc(&self) -> bool {
        self.rt.controller.request(self.rt, self.id)
    }

    /// Retires the current chunk and takes the next one for allocation.
    pub fn acquire_chunk(&mut self) -> Result<Acquired> {
        let rt = self.rt;
        if let Some(c) = self.current_chunk.take() {
            rt.chunks.chunk(c).set_state(ChunkState::Filled);
        }
        let acq = rt.chunks.get_chunk(
            &rt.topology,
            rt.config().placement,
            self.node,
            self.id,
        )?;
        self.stats.chunks_acquired += 1;
        self.stats.chunk_nodes[acq.node] += 1;
        self.current_chunk = Some(acq.chunk);
        if acq.fresh {
            self.stats.fresh_chunks += 1;
            rt.controller.on_fresh_chunk(rt, self.id);
        }
        Ok(acq)
    }

    /// Bump-allocates `bytes` in the current chunk, moving to a new one as
    /// needed. Returns the header address.
    pub(crate) fn global_alloc(&mut self, bytes: usize) -> Result<usize> {
        if let Some(c) = self.current_chunk {
            if let Some(a) = self.rt.chunks.chunk(c).try_bump(bytes) {
                return Ok(a);
            }
        }
        let acq = self.acquire_chunk()?;
        self.rt
            .chunks
            .chunk(acq.chunk)
            .try_bump(bytes)
            .ok_or(GcError::ObjectTooLarge {
                bytes,
                limit: self.rt.chunks.chunk_bytes(),
            })
    }

    pub fn header(&self, r: Reference) -> Result<ObjectHeader> {
        if r.is_null() || !r.is_aligned() || !self.rt.mem.is_mapped(r.header_addr()) {
            return Err(GcError::Invariant(format!("{r:?} is not an object reference")));
        }
        match HeaderWord::classify(self.rt.mem.load(r.header_addr())) {
            HeaderWord::Object(h) => Ok(h),
            HeaderWord::Forwarded(_) => Err(GcError::Forwarded(r)),
        }
    }

    pub fn read_field(&self, r: Reference, index: usize) -> Result<u64> {
        let h = self.header(r)?;
        if index as u64 >= h.length() {
            return Err(GcError::FieldOutOfBounds {
                index,
                length: h.length(),
            });
        }
        Ok(self.rt.mem.load(r.field_addr(index)))
    }

    /// Stores `value` into field `index` of one of this worker's own local
    /// objects. Global objects are immutable.
    pub fn write_field(&mut self, r: Reference, index: usize, value: u64) -> Result<()> {
        if self.rt.is_global(r.addr()) {
            return Err(GcError::GlobalMutation(r));
        }
        if !self.heap.in_occupied(r.addr()) {
            return Err(GcError::NotLocal(r));
        }
        let h = self.header(r)?;
        if index as u64 >= h.length() {
            return Err(GcError::FieldOutOfBounds {
                index,
                length: h.length(),
            });
        }
        let mut is_ptr = false;
        self.rt
            .table()
            .for_each_pointer_field(h, |i| is_ptr |= i == index)?;
        if is_ptr {
            self.check_pointer_value(value)?;
        }
        self.rt.mem.store(r.field_addr(index), value);
        Ok(())
    }

    /// Promotes root `index` and hands the global copy to `to`'s inbox.
    pub fn send(&mut self, gc: &mut dyn Collector<'rt>, index: usize, to: WorkerId) -> Result<Reference> {
        let r = self.roots.get(index);
        let res = self.promote(gc, r)?;
        self.rt.deliver(to, res.global_ref);
        Ok(res.global_ref)
    }

    /// Queues a steal request with `victim`.
    pub fn request_steal(&self, victim: WorkerId) {
        self.rt.steal_requests[victim].lock().push(self.id);
    }

    /// Serves queued steal requests: each thief receives a promoted copy
    /// of this worker's newest root.
    pub fn service_steals(&mut self, gc: &mut dyn Collector<'rt>) -> Result<usize> {
        let thieves = std::mem::take(&mut *self.rt.steal_requests[self.id].lock());
        let mut served = 0;
        for thief in thieves {
            let Some(i) = self.roots.len().checked_sub(1) else {
                continue;
            };
            let r = self.roots.get(i);
            let res = self.promote(gc, r)?;
            self.rt.deliver(thief, res.global_ref);
            served += 1;
        }
        Ok(served)
    }

    /// Moves inbox entries into the root set; returns how many arrived.
    pub fn receive(&mut self) -> usize {
        let items = std::mem::take(&mut *self.rt.inboxes[self.id].lock());
        let n = items.len();
        for r in items {
            self.roots.push(r);
        }
        n
    }

    fn local_snapshot(&self, extra: &[Reference]) -> Option<Result<GraphSnapshot, oracle::Diagnostic>> {
        if !self.rt.verifier.enabled() {
            return None;
        }
        let mut roots = self.roots.as_slice().to_vec();
        roots.extend_from_slice(extra);
        Some(oracle::snapshot(self.rt, &roots, &[&self.heap]))
    }

    /// Compares snapshots around a local operation and sweeps what it touched.
    fn verify_local(
        &self,
        what: &str,
        before: Option<Result<GraphSnapshot, oracle::Diagnostic>>,
        extra: &[Reference],
        copied: &[usize],
    ) {
        let v = &self.rt.verifier;
        let Some(before) = before else { return };
        let after = self.local_snapshot(extra).expect("verifier enabled");
        v.snapshots.fetch_add(1, Ordering::Relaxed);
        match (before, after) {
            (Ok(b), Ok(a)) => {
                if b.checksum() != a.checksum() || b.objects() != a.objects() {
                    v.fail(format!(
                        "worker {}: {what} changed the graph: {:016x} -> {:016x}",
                        self.id,
                        b.checksum(),
                        a.checksum()
                    ));
                }
            }
            (b, a) => v.fail(format!(
                "worker {}: invalid graph around {what}: before {:?}, after {:?}",
                self.id,
                b.err(),
                a.err()
            )),
        }
        let mut out = Vec::new();
        oracle::sweep_local_heap(self.rt, &self.heap, &mut out);
        oracle::sweep_roots(self.rt, self.id, self.roots.as_slice(), &mut out);
        oracle::sweep_objects(self.rt, copied.iter().copied(), &mut out);
        v.sweeps.fetch_add(1, Ordering::Relaxed);
        for viol in out {
            v.fail(format!("worker {}: after {what}: {viol}", self.id));
        }
    }
}
