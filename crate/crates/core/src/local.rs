//! Per-worker local heaps.
//!
//! Layout, low to high addresses:
//!
//! ```text
//! base   old_base      young_boundary     old_top     nursery_base   nursery_top   end
//!  |        |  older data  |   young data    |   free     |   allocated  |   free    |
//! ```
//!
//! A minor collection Cheney-copies live nursery objects to `old_top`, then
//! hands the upper half of the remaining space to a fresh nursery. Data
//! copied by that collection becomes "young"; whatever lay below the
//! previous `old_top` is older and is what a major collection evacuates.
//!
//! Zero words at a header position are padding and are skipped by walkers.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chunk::WorkerId;
use crate::error::{AllocError, GcError, Result};
use crate::memory::{round_down, round_up, Memory};
use crate::object::{
    encode_header, DescriptorTable, HeaderWord, ObjectHeader, ObjectKind, Reference, WORD_BYTES,
};

/// A worker's published allocation limit. The collector stores 0 here to
/// ask the worker to enter a collection at its next allocation.
#[derive(Clone, Debug)]
pub struct AllocationWindow {
    limit: Arc<AtomicUsize>,
    gc_pending: Arc<AtomicBool>,
}

impl AllocationWindow {
    pub(crate) fn new(limit: Arc<AtomicUsize>, gc_pending: Arc<AtomicBool>) -> Self {
        AllocationWindow { limit, gc_pending }
    }

    /// A window that is never signalled, for heaps used in isolation.
    pub fn detached() -> Self {
        Self::new(Arc::default(), Arc::default())
    }

    #[inline]
    pub fn limit(&self) -> usize {
        self.limit.load(Ordering::Acquire)
    }

    /// Publishes a new limit without losing a concurrent zero store.
    pub(crate) fn publish(&self, limit: usize) {
        self.limit.store(limit, Ordering::SeqCst);
        if self.gc_pending.load(Ordering::SeqCst) {
            self.limit.store(0, Ordering::SeqCst);
        }
    }

    pub(crate) fn gc_pending(&self) -> bool {
        self.gc_pending.load(Ordering::SeqCst)
    }
}

/// Ordered mutator roots.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RootSet {
    slots: Vec<Reference>,
}

impl RootSet {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn push(&mut self, r: Reference) -> usize {
        self.slots.push(r);
        self.slots.len() - 1
    }
    pub fn pop(&mut self) -> Option<Reference> {
        self.slots.pop()
    }
    pub fn get(&self, i: usize) -> Reference {
        self.slots[i]
    }
    pub fn set(&mut self, i: usize, r: Reference) {
        self.slots[i] = r;
    }
    pub fn remove(&mut self, i: usize) -> Reference {
        self.slots.remove(i)
    }
    pub fn truncate(&mut self, len: usize) {
        self.slots.truncate(len)
    }
    pub fn len(&self) -> usize {
        self.slots.len()
    }
    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
    pub fn as_slice(&self) -> &[Reference] {
        &self.slots
    }
    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Reference> {
        self.slots.iter_mut()
    }
}

/// A nursery block reserved by a single limit test. Objects are placed
/// into it without further checks; an unfilled tail stays zero padding.
#[derive(Debug)]
pub struct Block {
    start: usize,
    cursor: usize,
    end: usize,
}

impl Block {
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn remaining(&self) -> usize {
        self.end - self.cursor
    }

    /// Writes `header` and `fields` at the cursor.
    pub fn place(&mut self, mem: &Memory, header: ObjectHeader, fields: &[u64]) -> Reference {
        debug_assert_eq!(header.length() as usize, fields.len());
        let bytes = header.object_bytes();
        assert!(bytes <= self.remaining(), "object overruns its block");
        mem.store(self.cursor, header.raw());
        for (i, &f) in fields.iter().enumerate() {
            mem.store(self.cursor + (i + 1) * WORD_BYTES, f);
        }
        let r = Reference::from_addr(self.cursor + WORD_BYTES);
        self.cursor += bytes;
        r
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinorStats {
    pub bytes_copied: usize,
    pub objects_copied: usize,
    /// Free space left after copying, before the split.
    pub free_bytes: usize,
    pub new_nursery_bytes: usize,
    pub triggered_major: bool,
}

/// Nursery size for `free` bytes of post-copy space: the upper half, with
/// the split point rounded up to a word.
#[inline]
pub const fn nursery_share(free: usize) -> usize {
    free - round_up(free / 2, WORD_BYTES)
}

#[derive(Debug)]
pub struct LocalHeap {
    owner: WorkerId,
    base: usize,
    end: usize,
    pub(crate) old_base: usize,
    pub(crate) young_boundary: usize,
    pub(crate) old_top: usize,
    pub(crate) nursery_base: usize,
    pub(crate) nursery_top: usize,
    nursery_limit: usize,
    major_threshold_bytes: usize,
    window: AllocationWindow,
}

impl LocalHeap {
    /// Creates an empty heap over `[base, base + size)` of `mem`'s local
    /// arena. The nursery starts as the upper half.
    pub fn new(
        mem: &Memory,
        owner: WorkerId,
        base: usize,
        size: usize,
        major_threshold_fraction: f64,
        window: AllocationWindow,
    ) -> Result<Self> {
        if size == 0 || !size.is_multiple_of(WORD_BYTES) || !base.is_multiple_of(WORD_BYTES) {
            return Err(GcError::Config(format!(
                "local heap size {size} must be a positive multiple of {WORD_BYTES}"
            )));
        }
        if !(mem.local.contains(base) && mem.local.contains(base + size - WORD_BYTES)) {
            return Err(GcError::Config("local heap outside the local arena".into()));
        }
        if !(0.0..=1.0).contains(&major_threshold_fraction) {
            return Err(GcError::Config(format!(
                "major threshold fraction {major_threshold_fraction} outside [0, 1]"
            )));
        }
        let mut heap = LocalHeap {
            owner,
            base,
            end: base + size,
            old_base: base,
            young_boundary: base,
            old_top: base,
            nursery_base: base,
            nursery_top: base,
            nursery_limit: base + size,
            major_threshold_bytes: (major_threshold_fraction * size as f64) as usize,
            window,
        };
        heap.split_nursery(mem);
        Ok(heap)
    }

    pub fn owner(&self) -> WorkerId {
        self.owner
    }
    pub fn base(&self) -> usize {
        self.base
    }
    pub fn end(&self) -> usize {
        self.end
    }
    pub fn size(&self) -> usize {
        self.end - self.base
    }
    pub fn old_base(&self) -> usize {
        self.old_base
    }
    pub fn young_boundary(&self) -> usize {
        self.young_boundary
    }
    pub fn old_top(&self) -> usize {
        self.old_top
    }
    pub fn nursery_base(&self) -> usize {
        self.nursery_base
    }
    pub fn nursery_top(&self) -> usize {
        self.nursery_top
    }
    pub fn nursery_limit(&self) -> usize {
        self.nursery_limit
    }
    pub fn nursery_capacity(&self) -> usize {
        self.nursery_limit - self.nursery_base
    }
    pub fn nursery_free(&self) -> usize {
        self.nursery_limit - self.nursery_top
    }
    pub fn window(&self) -> &AllocationWindow {
        &self.window
    }

    #[inline]
    pub fn contains(&self, addr: usize) -> bool {
        addr >= self.base && addr < self.end
    }
    #[inline]
    pub fn in_nursery(&self, addr: usize) -> bool {
        addr >= self.nursery_base && addr < self.nursery_top
    }
    #[inline]
    pub fn in_old_area(&self, addr: usize) -> bool {
        addr >= self.old_base && addr < self.old_top
    }
    /// Whether `addr` lies inside an occupied part of the heap.
    #[inline]
    pub fn in_occupied(&self, addr: usize) -> bool {
        self.in_old_area(addr) || self.in_nursery(addr)
    }

    /// Checks the cursor ordering invariant.
    pub fn check_layout(&self) -> Result<()> {
        let ok = self.base <= self.old_base
            && self.old_base <= self.young_boundary
            && self.young_boundary <= self.old_top
            && self.old_top <= self.nursery_base
            && self.nursery_base <= self.nursery_top
            && self.nursery_top <= self.nursery_limit
            && self.nursery_limit <= self.end;
        if ok {
            Ok(())
        } else {
            Err(GcError::Invariant(format!(
                "worker {} heap cursors out of order: {self:?}",
                self.owner
            )))
        }
    }

    /// Reserves `total` bytes with one limit test.
    pub fn alloc_block(&mut self, total: usize) -> Result<Block, AllocError> {
        debug_assert!(total.is_multiple_of(WORD_BYTES));
        let limit = self.window.limit();
        if limit == 0 {
            return Err(AllocError::GlobalGcRequested);
        }
        if self.nursery_top + total > limit {
            return Err(AllocError::MinorGcRequired);
        }
        let start = self.nursery_top;
        self.nursery_top += total;
        Ok(Block {
            start,
            cursor: start,
            end: start + total,
        })
    }

    /// Allocates one object holding `fields` verbatim.
    pub fn alloc_object(
        &mut self,
        mem: &Memory,
        table: &DescriptorTable,
        kind: ObjectKind,
        fields: &[u64],
    ) -> Result<Reference> {
        let header = encode_header(kind, fields.len() as u64, table)?;
        let mut block = self.alloc_block(header.object_bytes())?;
        Ok(block.place(mem, header, fields))
    }

    /// Hands the upper half of the free space above `old_top` to the nursery.
    pub(crate) fn split_nursery(&mut self, mem: &Memory) -> usize {
        let free = self.end - self.old_top;
        self.nursery_base = self.old_top + round_up(free / 2, WORD_BYTES);
        self.nursery_top = self.nursery_base;
        self.nursery_limit = self.end;
        mem.fill_zero(self.nursery_base, self.end);
        self.window.publish(self.nursery_limit);
        self.nursery_capacity()
    }

    /// Re-publishes the limit after a collection completes.
    pub(crate) fn restore_limit(&self) {
        self.window.publish(self.nursery_limit);
    }

    pub(crate) fn below_major_threshold(&self) -> bool {
        self.nursery_capacity() < self.major_threshold_bytes
    }

    /// Calls `f(header_addr, header)` for each object in `[start, end)`.
    pub(crate) fn walk(
        mem: &Memory,
        start: usize,
        end: usize,
        mut f: impl FnMut(usize, ObjectHeader) -> Result<()>,
    ) -> Result<()> {
        let mut a = start;
        while a < end {
            let w = mem.load(a);
            if w == 0 {
                a += WORD_BYTES;
                continue;
            }
            match HeaderWord::classify(w) {
                HeaderWord::Object(h) => {
                    f(a, h)?;
                    a += h.object_bytes();
                }
                HeaderWord::Forwarded(r) => return Err(GcError::Forwarded(r)),
            }
        }
        Ok(())
    }

    /// Calls `f(slot_addr)` for each pointer slot of objects in `[start, end)`.
    pub(crate) fn walk_pointer_slots(
        mem: &Memory,
        table: &DescriptorTable,
        start: usize,
        end: usize,
        mut f: impl FnMut(usize),
    ) -> Result<()> {
        Self::walk(mem, start, end, |hdr, h| {
            table.for_each_pointer_field(h, |i| f(hdr + (i + 1) * WORD_BYTES))?;
            Ok(())
        })
    }

    /// Pointer slots in the old area whose targets lie in the nursery.
    pub fn scan_old_area_for_nursery_refs(
        &self,
        mem: &Memory,
        table: &DescriptorTable,
    ) -> Result<std::vec::IntoIter<usize>> {
        let mut out = Vec::new();
        Self::walk_pointer_slots(mem, table, self.old_base, self.old_top, |slot| {
            if self.in_nursery(mem.load(slot) as usize) {
                out.push(slot);
            }
        })?;
        Ok(out.into_iter())
    }

    /// Copies live nursery data to the old area and re-splits the free space.
    pub fn minor_gc(
        &mut self,
        mem: &Memory,
        table: &DescriptorTable,
        roots: &mut RootSet,
    ) -> Result<MinorStats> {
        let copy_start = self.old_top;
        let mut copier = NurseryCopier {
            mem,
            from: self.nursery_base..self.nursery_top,
            free: copy_start,
            limit: self.nursery_base,
            objects: 0,
        };
        for r in roots.iter_mut() {
            *r = copier.forward(*r)?;
        }
        let mut old_slots = Vec::new();
        Self::walk_pointer_slots(mem, table, self.old_base, copy_start, |s| old_slots.push(s))?;
        for slot in old_slots {
            let v = Reference::from_raw(mem.load(slot));
            let n = copier.forward(v)?;
            if n != v {
                mem.store(slot, n.raw());
            }
        }
        let mut scan = copy_start;
        while scan < copier.free {
            let h = ObjectHeader::from_word_unchecked(mem.load(scan));
            let mut fwd = Ok(());
            table.for_each_pointer_field(h, |i| {
                if fwd.is_err() {
                    return;
                }
                let slot = scan + (i + 1) * WORD_BYTES;
                let v = Reference::from_raw(mem.load(slot));
                match copier.forward(v) {
                    Ok(n) if n != v => mem.store(slot, n.raw()),
                    Ok(_) => {}
                    Err(e) => fwd = Err(e),
                }
            })?;
            fwd?;
            scan += h.object_bytes();
        }
        let bytes_copied = copier.free - copy_start;
        let objects_copied = copier.objects;
        self.young_boundary = copy_start;
        self.old_top = copier.free;
        let free_bytes = self.end - self.old_top;
        let new_nursery_bytes = self.split_nursery(mem);
        let triggered_major = self.below_major_threshold() || self.window.gc_pending();
        Ok(MinorStats {
            bytes_copied,
            objects_copied,
            free_bytes,
            new_nursery_bytes,
            triggered_major,
        })
    }

    /// Resets the old area to `[base, base + young_bytes)` after a major
    /// collection compacted young data down to `base`.
    pub(crate) fn reset_old_area(&mut self, mem: &Memory, young_bytes: usize) {
        self.old_base = self.base;
        self.young_boundary = self.base;
        self.old_top = self.base + young_bytes;
        self.split_nursery(mem);
    }
}

struct NurseryCopier<'m> {
    mem: &'m Memory,
    from: std::ops::Range<usize>,
    free: usize,
    limit: usize,
    objects: usize,
}

impl NurseryCopier<'_> {
    #[inline]
    fn forward(&mut self, r: Reference) -> Result<Reference> {
        if !self.from.contains(&r.addr()) {
            return Ok(r);
        }
        let hdr_addr = r.header_addr();
        let h = match HeaderWord::classify(self.mem.load(hdr_addr)) {
            HeaderWord::Forwarded(to) => return Ok(to),
            HeaderWord::Object(h) => h,
        };
        let bytes = h.object_bytes();
        if self.free + bytes > self.limit {
            return Err(GcError::MajorGcRequired);
        }
        self.mem.copy_words(hdr_addr, self.free, bytes / WORD_BYTES);
        let to = Reference::from_addr(self.free + WORD_BYTES);
        self.mem.store(hdr_addr, to.raw());
        self.free += bytes;
        self.objects += 1;
        Ok(to)
    }
}

/// Exact expected nursery size after a split of `free` bytes.
pub fn expected_nursery_bytes(free: usize) -> usize {
    round_down(free / 2, WORD_BYTES)
}
