//! Copying local data into the global heap: major collections and promotion.

use std::collections::{HashMap, VecDeque};

use crate::error::{GcError, Result};
use crate::local::LocalHeap;
use crate::object::{HeaderWord, ObjectHeader, ObjectKind, Reference, WORD_BYTES};
use crate::worker::{MajorStats, PromotionResult, Worker};

/// Which local objects an evacuation may move.
#[derive(Clone, Copy)]
enum Scope {
    /// `[old_base, young_boundary)`.
    Older,
    /// The whole old area.
    OldArea,
    /// The old area and the nursery.
    Occupied,
}

#[derive(Default)]
struct Evacuation {
    queue: VecDeque<usize>,
    /// Header address and size of every moved local object.
    moved: Vec<(usize, usize, Reference)>,
    bytes: usize,
    young_bytes: usize,
    /// Header addresses of global copies, kept when verifying.
    copied: Vec<usize>,
    record: bool,
}

impl Worker<'_> {
    fn in_scope(&self, scope: Scope, addr: usize) -> bool {
        let h = &self.heap;
        match scope {
            Scope::Older => addr >= h.old_base && addr < h.young_boundary,
            Scope::OldArea => h.in_old_area(addr),
            Scope::Occupied => h.in_occupied(addr),
        }
    }

    fn evacuate(&mut self, ev: &mut Evacuation, v: u64, scope: Scope) -> Result<u64> {
        let r = Reference::from_raw(v);
        if r.is_null() || !self.in_scope(scope, r.addr()) {
            return Ok(v);
        }
        let mem = &self.rt.mem;
        let hdr = r.header_addr();
        let h = match HeaderWord::classify(mem.load(hdr)) {
            HeaderWord::Forwarded(to) => return Ok(to.raw()),
            HeaderWord::Object(h) => h,
        };
        let bytes = h.object_bytes();
        let dst = self.global_alloc(bytes)?;
        mem.copy_words(hdr, dst, bytes / WORD_BYTES);
        let to = Reference::from_addr(dst + WORD_BYTES);
        mem.store(hdr, to.raw());
        ev.queue.push_back(dst);
        ev.moved.push((hdr, bytes, to));
        ev.bytes += bytes;
        if hdr >= self.heap.young_boundary {
            ev.young_bytes += bytes;
        }
        if ev.record {
            ev.copied.push(dst);
        }
        Ok(to.raw())
    }

    /// Scans queued global copies, moving every local object they reach.
    fn drain(&mut self, ev: &mut Evacuation, scope: Scope) -> Result<()> {
        let mut slots = Vec::new();
        while let Some(dst) = ev.queue.pop_front() {
            let h = ObjectHeader::from_word_unchecked(self.rt.mem.load(dst));
            slots.clear();
            self.rt
                .table
                .for_each_pointer_field(h, |i| slots.push(dst + (i + 1) * WORD_BYTES))?;
            for &slot in &slots {
                let v = self.rt.mem.load(slot);
                let n = self.evacuate(ev, v, scope)?;
                if n != v {
                    self.rt.mem.store(slot, n);
                }
            }
        }
        Ok(())
    }

    /// Major collection over a freshly minor-collected heap. Returns the
    /// header addresses of the global copies when verifying.
    pub(crate) fn major_gc_inner(&mut self) -> Result<(MajorStats, Vec<usize>)> {
        if self.heap.nursery_top != self.heap.nursery_base {
            return Err(GcError::Invariant(
                "major collection needs an empty nursery".into(),
            ));
        }
        let rt = self.rt;
        let mem = &rt.mem;
        let table = &rt.table;
        let (young_start, young_end) = (self.heap.young_boundary, self.heap.old_top);
        let mut young_slots = Vec::new();
        LocalHeap::walk_pointer_slots(mem, table, young_start, young_end, |s| young_slots.push(s))?;

        let mut ev = Evacuation {
            record: rt.verifier.enabled(),
            ..Evacuation::default()
        };
        for i in 0..self.roots.len() {
            let v = self.roots.get(i).raw();
            let n = self.evacuate(&mut ev, v, Scope::Older)?;
            self.roots.set(i, Reference::from_raw(n));
        }
        for &slot in &young_slots {
            let v = mem.load(slot);
            let n = self.evacuate(&mut ev, v, Scope::Older)?;
            if n != v {
                mem.store(slot, n);
            }
        }
        // Global copies may not point back into the local heap, so anything
        // local they reach moves too, young data included.
        self.drain(&mut ev, Scope::OldArea)?;

        // Young objects pulled out by global copies left forwarding words;
        // route remaining local references through them.
        let forwarded_young: HashMap<usize, usize> = ev
            .moved
            .iter()
            .filter(|&&(hdr, _, _)| hdr >= young_start)
            .map(|&(hdr, bytes, _)| (hdr, bytes))
            .collect();
        let resolve = |v: u64| -> u64 {
            let r = Reference::from_raw(v);
            if !r.is_null() && r.addr() >= young_start && r.addr() < young_end {
                if let HeaderWord::Forwarded(to) = HeaderWord::classify(mem.load(r.header_addr())) {
                    return to.raw();
                }
            }
            v
        };
        for i in 0..self.roots.len() {
            let v = self.roots.get(i).raw();
            self.roots.set(i, Reference::from_raw(resolve(v)));
        }
        for &slot in &young_slots {
            let v = mem.load(slot);
            let n = resolve(v);
            if n != v {
                mem.store(slot, n);
            }
        }

        // Slide surviving young objects down to the heap base.
        let base = self.heap.base();
        let mut survivors: Vec<(usize, usize, usize)> = Vec::new();
        let mut next = base;
        let mut a = young_start;
        while a < young_end {
            let w = mem.load(a);
            if w == 0 {
                a += WORD_BYTES;
                continue;
            }
            match HeaderWord::classify(w) {
                HeaderWord::Object(h) => {
                    let bytes = h.object_bytes();
                    survivors.push((a, next, bytes));
                    next += bytes;
                    a += bytes;
                }
                HeaderWord::Forwarded(_) => {
                    a += forwarded_young.get(&a).copied().ok_or_else(|| {
                        GcError::Invariant(format!("stray forwarding word at {a:#x}"))
                    })?;
                }
            }
        }
        let relocate = |v: u64| -> u64 {
            let r = Reference::from_raw(v);
            if r.is_null() || r.addr() < young_start || r.addr() >= young_end {
                return v;
            }
            let hdr = r.header_addr();
            match survivors.binary_search_by_key(&hdr, |s| s.0) {
                Ok(i) => (survivors[i].1 + WORD_BYTES) as u64,
                Err(_) => v,
            }
        };
        for i in 0..self.roots.len() {
            let v = self.roots.get(i).raw();
            self.roots.set(i, Reference::from_raw(relocate(v)));
        }
        for &(old, _, bytes) in &survivors {
            LocalHeap::walk_pointer_slots(mem, table, old, old + bytes, |slot| {
                let v = mem.load(slot);
                let n = relocate(v);
                if n != v {
                    mem.store(slot, n);
                }
            })?;
        }
        for &(old, new, bytes) in &survivors {
            if old != new {
                mem.copy_words(old, new, bytes / WORD_BYTES);
            }
        }
        let retained = next - base;
        self.heap.reset_old_area(mem, retained);
        Ok((
            MajorStats {
                older_bytes_copied: ev.bytes - ev.young_bytes,
                young_bytes_copied: ev.young_bytes,
                objects_copied: ev.moved.len(),
                young_bytes_retained: retained,
            },
            ev.copied,
        ))
    }

    /// Copies the local closure of `r` into the global heap and rewrites
    /// every local reference to the moved objects.
    pub(crate) fn promote_inner(&mut self, r: Reference) -> Result<(PromotionResult, Vec<usize>)> {
        let rt = self.rt;
        let mem = &rt.mem;
        let mut ev = Evacuation {
            record: rt.verifier.enabled(),
            ..Evacuation::default()
        };
        let g = Reference::from_raw(self.evacuate(&mut ev, r.raw(), Scope::Occupied)?);
        self.drain(&mut ev, Scope::Occupied)?;

        // The husks become raw filler so heap walks stay well formed.
        let mut map: HashMap<usize, Reference> = HashMap::with_capacity(ev.moved.len());
        for &(hdr, bytes, to) in &ev.moved {
            let len = (bytes / WORD_BYTES - 1) as u64;
            let filler = ObjectHeader::encode(ObjectKind::Raw, len)?;
            mem.store(hdr, filler.raw());
            map.insert(hdr + WORD_BYTES, to);
        }
        let rewrite = |v: u64| -> Option<u64> {
            map.get(&(v as usize)).map(|to| to.raw())
        };
        for i in 0..self.roots.len() {
            if let Some(n) = rewrite(self.roots.get(i).raw()) {
                self.roots.set(i, Reference::from_raw(n));
            }
        }
        let h = &self.heap;
        for (start, end) in [(h.old_base, h.old_top), (h.nursery_base, h.nursery_top)] {
            LocalHeap::walk_pointer_slots(mem, &rt.table, start, end, |slot| {
                if let Some(n) = rewrite(mem.load(slot)) {
                    mem.store(slot, n);
                }
            })?;
        }
        Ok((
            PromotionResult {
                global_ref: g,
                bytes_promoted: ev.bytes,
            },
            ev.copied,
        ))
    }
}
