//! Reference tracer and heap sweeps used to check every collection.
//!
//! A [`GraphSnapshot`] numbers reachable objects breadth-first from the
//! roots in order and records each object's id, length and fields with
//! pointers replaced by object numbers. It never encodes addresses, so
//! moving objects leaves it unchanged.
//!
//! The checksum is 64-bit FNV-1a over this little-endian encoding:
//!
//! ```text
//! u64 root_count, then per root:   u8 tag (0 null, 1 edge), u64 index
//! u64 object_count, then per object: u16 id, u64 length,
//!     per field: u8 tag (0 raw word, 1 edge, 2 null), u64 value
//! ```

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::chunk::{ChunkState, WorkerId};
use crate::local::LocalHeap;
use crate::object::{
    decode_header, HeaderWord, ObjectHeader, Reference, WORD_BYTES,
};
use crate::protocol::all_roots;
use crate::runtime::Runtime;
use crate::worker::Worker;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Field {
    Raw(u64),
    Edge(u32),
    Null,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapObject {
    pub id: u16,
    pub length: u64,
    pub fields: Vec<Field>,
}

#[derive(Clone, Debug)]
pub struct GraphSnapshot {
    roots: Vec<Option<u32>>,
    objects: Vec<SnapObject>,
    addresses: Vec<usize>,
    checksum: u64,
}

impl PartialEq for GraphSnapshot {
    fn eq(&self, other: &Self) -> bool {
        self.roots == other.roots && self.objects == other.objects
    }
}

impl GraphSnapshot {
    pub fn checksum(&self) -> u64 {
        self.checksum
    }
    pub fn roots(&self) -> &[Option<u32>] {
        &self.roots
    }
    pub fn objects(&self) -> &[SnapObject] {
        &self.objects
    }
    /// Payload address of each object at snapshot time.
    pub fn addresses(&self) -> &[usize] {
        &self.addresses
    }
    pub fn edge_count(&self) -> usize {
        self.objects
            .iter()
            .flat_map(|o| &o.fields)
            .filter(|f| matches!(f, Field::Edge(_)))
            .count()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.roots.len() as u64).to_le_bytes());
        for r in &self.roots {
            let (tag, v) = match r {
                None => (0u8, 0u64),
                Some(i) => (1, *i as u64),
            };
            out.push(tag);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.objects.len() as u64).to_le_bytes());
        for o in &self.objects {
            out.extend_from_slice(&o.id.to_le_bytes());
            out.extend_from_slice(&o.length.to_le_bytes());
            for f in &o.fields {
                let (tag, v) = match *f {
                    Field::Raw(w) => (0u8, w),
                    Field::Edge(i) => (1, i as u64),
                    Field::Null => (2, 0),
                };
                out.push(tag);
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Checksum of the empty graph.
pub fn empty_checksum() -> u64 {
    fnv1a(&GraphSnapshot {
        roots: Vec::new(),
        objects: Vec::new(),
        addresses: Vec::new(),
        checksum: 0,
    }
    .encode())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Local(WorkerId),
    Global(usize),
    Unmapped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagnosticKind {
    Misaligned,
    Unmapped,
    /// Target lies in a chunk on a free list.
    FreeChunk,
    /// Target is outside the allocated part of its region.
    OutsideObjects,
    /// Target is in a local heap not under inspection.
    ForeignLocal,
    Forwarded,
    MalformedHeader,
}

/// Where a bad reference was found.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Referrer {
    Root(usize),
    Slot(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub address: usize,
    pub region: Region,
    pub referrer: Referrer,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} reference {:#x} in {:?}, from {:?}",
            self.kind, self.address, self.region, self.referrer
        )
    }
}

impl std::error::Error for Diagnostic {}

pub fn region_of(rt: &Runtime, addr: usize) -> Region {
    if let Some(w) = rt.local_owner(addr) {
        Region::Local(w)
    } else if let Some(c) = rt.chunks.chunk_of(addr) {
        Region::Global(c.id())
    } else {
        Region::Unmapped
    }
}

/// Validates that `r` addresses a well-formed object and returns its header.
fn resolve(
    rt: &Runtime,
    heaps: &[&LocalHeap],
    r: Reference,
) -> Result<ObjectHeader, (DiagnosticKind, Region)> {
    let addr = r.addr();
    let region = region_of(rt, addr);
    if !r.is_aligned() {
        return Err((DiagnosticKind::Misaligned, region));
    }
    let end = match region {
        Region::Unmapped => return Err((DiagnosticKind::Unmapped, region)),
        Region::Local(w) => {
            let Some(h) = heaps.iter().find(|h| h.owner() == w) else {
                return Err((DiagnosticKind::ForeignLocal, region));
            };
            let hdr = r.header_addr();
            if h.in_old_area(hdr) && h.in_old_area(addr) {
                h.old_top()
            } else if h.in_nursery(hdr) && h.in_nursery(addr) {
                h.nursery_top()
            } else {
                return Err((DiagnosticKind::OutsideObjects, region));
            }
        }
        Region::Global(id) => {
            let c = rt.chunks.chunk(id);
            if c.state() == ChunkState::Free {
                return Err((DiagnosticKind::FreeChunk, region));
            }
            if r.header_addr() < c.base() || addr >= c.top() {
                return Err((DiagnosticKind::OutsideObjects, region));
            }
            c.top()
        }
    };
    let h = match decode_header(rt.mem.load(r.header_addr()), &rt.table) {
        Ok(HeaderWord::Object(h)) => h,
        Ok(HeaderWord::Forwarded(_)) => return Err((DiagnosticKind::Forwarded, region)),
        Err(_) => return Err((DiagnosticKind::MalformedHeader, region)),
    };
    if rt.table.check_kind(h.kind(), h.length()).is_err() || r.header_addr() + h.object_bytes() > end {
        return Err((DiagnosticKind::MalformedHeader, region));
    }
    Ok(h)
}

/// Traces the graph reachable from `roots`. Local references must point
/// into one of `heaps`.
pub fn snapshot(
    rt: &Runtime,
    roots: &[Reference],
    heaps: &[&LocalHeap],
) -> Result<GraphSnapshot, Diagnostic> {
    let mut index: HashMap<usize, u32> = HashMap::new();
    let mut queue: VecDeque<(usize, ObjectHeader)> = VecDeque::new();
    let mut addresses = Vec::new();

    let mut visit = |r: Reference,
                     referrer: Referrer,
                     queue: &mut VecDeque<(usize, ObjectHeader)>,
                     addresses: &mut Vec<usize>|
     -> Result<Option<u32>, Diagnostic> {
        if r.is_null() {
            return Ok(None);
        }
        if let Some(&i) = index.get(&r.addr()) {
            return Ok(Some(i));
        }
        let h = resolve(rt, heaps, r).map_err(|(kind, region)| Diagnostic {
            kind,
            address: r.addr(),
            region,
            referrer,
        })?;
        let i = addresses.len() as u32;
        index.insert(r.addr(), i);
        addresses.push(r.addr());
        queue.push_back((r.addr(), h));
        Ok(Some(i))
    };

    let mut root_ids = Vec::with_capacity(roots.len());
    for (k, &r) in roots.iter().enumerate() {
        root_ids.push(visit(r, Referrer::Root(k), &mut queue, &mut addresses)?);
    }
    let mut objects = Vec::new();
    let mut is_ptr = Vec::new();
    while let Some((addr, h)) = queue.pop_front() {
        let len = h.length() as usize;
        is_ptr.clear();
        is_ptr.resize(len, false);
        rt.table
            .for_each_pointer_field(h, |i| is_ptr[i] = true)
            .expect("header validated");
        let mut fields = Vec::with_capacity(len);
        for (i, &p) in is_ptr.iter().enumerate() {
            let slot = addr + i * WORD_BYTES;
            let w = rt.mem.load(slot);
            fields.push(if !p {
                Field::Raw(w)
            } else {
                match visit(Reference::from_raw(w), Referrer::Slot(slot), &mut queue, &mut addresses)? {
                    None => Field::Null,
                    Some(j) => Field::Edge(j),
                }
            });
        }
        objects.push(SnapObject {
            id: h.id(),
            length: h.length(),
            fields,
        });
    }
    let mut snap = GraphSnapshot {
        roots: root_ids,
        objects,
        addresses,
        checksum: 0,
    };
    snap.checksum = fnv1a(&snap.encode());
    Ok(snap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    /// A global object points into a local heap.
    GlobalToLocal,
    /// A local heap or root set points into another worker's heap.
    ForeignLocal,
    MalformedHeader,
    /// Pointer to nothing: unmapped, misaligned, free chunk, or past the
    /// allocated part of its region.
    Dangling,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Address of the offending slot, or of the header for malformed ones.
    /// For roots, the root index.
    pub at: usize,
    pub value: u64,
    pub region: Region,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} at {:#x} in {:?} (value {:#x})",
            self.kind, self.at, self.region, self.value
        )
    }
}

/// Classifies one pointer value held in `holder`.
fn check_pointer(
    rt: &Runtime,
    holder: Region,
    own_heap: Option<&LocalHeap>,
    at: usize,
    v: u64,
    out: &mut Vec<Violation>,
) {
    if v == 0 {
        return;
    }
    let addr = v as usize;
    let bad = |kind| Violation {
        kind,
        at,
        value: v,
        region: holder,
    };
    if !addr.is_multiple_of(WORD_BYTES) {
        out.push(bad(ViolationKind::Dangling));
        return;
    }
    match region_of(rt, addr) {
        Region::Local(owner) => match holder {
            Region::Global(_) | Region::Unmapped => out.push(bad(ViolationKind::GlobalToLocal)),
            Region::Local(me) if me != owner => out.push(bad(ViolationKind::ForeignLocal)),
            Region::Local(_) => {
                if let Some(h) = own_heap {
                    if !h.in_occupied(addr) {
                        out.push(bad(ViolationKind::Dangling));
                    }
                }
            }
        },
        Region::Global(id) => {
            let c = rt.chunks.chunk(id);
            if c.state() == ChunkState::Free || addr >= c.top() || addr < c.base() + WORD_BYTES {
                out.push(bad(ViolationKind::Dangling));
            }
        }
        Region::Unmapped => out.push(bad(ViolationKind::Dangling)),
    }
}

fn check_object(
    rt: &Runtime,
    holder: Region,
    own_heap: Option<&LocalHeap>,
    hdr: usize,
    h: ObjectHeader,
    out: &mut Vec<Violation>,
) {
    let r = rt
        .table
        .for_each_pointer_field(h, |i| {
            let slot = hdr + (i + 1) * WORD_BYTES;
            check_pointer(rt, holder, own_heap, slot, rt.mem.load(slot), out);
        });
    if r.is_err() || rt.table.check_kind(h.kind(), h.length()).is_err() {
        out.push(Violation {
            kind: ViolationKind::MalformedHeader,
            at: hdr,
            value: h.raw(),
            region: holder,
        });
    }
}

/// Walks `[start, end)`; zero words are padding when `padding` is set.
fn sweep_range(
    rt: &Runtime,
    holder: Region,
    own_heap: Option<&LocalHeap>,
    start: usize,
    end: usize,
    padding: bool,
    out: &mut Vec<Violation>,
) {
    let mut a = start;
    while a < end {
        let w = rt.mem.load(a);
        if w == 0 && padding {
            a += WORD_BYTES;
            continue;
        }
        match HeaderWord::classify(w) {
            HeaderWord::Object(h) if a + h.object_bytes() <= end => {
                check_object(rt, holder, own_heap, a, h, out);
                a += h.object_bytes();
            }
            _ => {
                out.push(Violation {
                    kind: ViolationKind::MalformedHeader,
                    at: a,
                    value: w,
                    region: holder,
                });
                return;
            }
        }
    }
}

pub fn sweep_local_heap(rt: &Runtime, heap: &LocalHeap, out: &mut Vec<Violation>) {
    let holder = Region::Local(heap.owner());
    sweep_range(rt, holder, Some(heap), heap.old_base(), heap.old_top(), true, out);
    sweep_range(rt, holder, Some(heap), heap.nursery_base(), heap.nursery_top(), true, out);
}

/// Roots of `owner` may hold null, its own local references, or globals.
pub fn sweep_roots(rt: &Runtime, owner: WorkerId, roots: &[Reference], out: &mut Vec<Violation>) {
    for (i, r) in roots.iter().enumerate() {
        check_pointer(rt, Region::Local(owner), None, i, r.raw(), out);
    }
}

/// Checks individual global objects by header address.
pub fn sweep_objects(rt: &Runtime, headers: impl IntoIterator<Item = usize>, out: &mut Vec<Violation>) {
    for hdr in headers {
        let region = region_of(rt, hdr);
        match HeaderWord::classify(rt.mem.load(hdr)) {
            HeaderWord::Object(h) => check_object(rt, region, None, hdr, h, out),
            HeaderWord::Forwarded(_) => out.push(Violation {
                kind: ViolationKind::MalformedHeader,
                at: hdr,
                value: rt.mem.load(hdr),
                region,
            }),
        }
    }
}

/// Walks every chunk that is not free.
pub fn sweep_chunks(rt: &Runtime, out: &mut Vec<Violation>) {
    for id in rt.chunks.in_use_chunks() {
        let c = rt.chunks.chunk(id);
        sweep_range(rt, Region::Global(id), None, c.base(), c.top(), false, out);
    }
}

/// Full sweep at a quiescent point: every local heap, every in-use chunk,
/// every root set (indexed like `heaps`) and every inbox.
pub fn sweep_check(rt: &Runtime, heaps: &[&LocalHeap], roots: &[&[Reference]]) -> Vec<Violation> {
    let mut out = Vec::new();
    for h in heaps {
        sweep_local_heap(rt, h, &mut out);
    }
    for (h, r) in heaps.iter().zip(roots) {
        sweep_roots(rt, h.owner(), r, &mut out);
    }
    for (w, inbox) in rt.inboxes.iter().enumerate() {
        for (i, r) in inbox.lock().iter().enumerate() {
            if !r.is_null() && !rt.is_global(r.addr()) {
                out.push(Violation {
                    kind: ViolationKind::ForeignLocal,
                    at: i,
                    value: r.raw(),
                    region: Region::Local(w),
                });
            }
        }
    }
    sweep_chunks(rt, &mut out);
    out
}

/// Snapshot of every worker's roots and inbox, in worker order.
pub fn snapshot_all(rt: &Runtime, workers: &[&Worker<'_>]) -> Result<GraphSnapshot, Diagnostic> {
    let heaps: Vec<&LocalHeap> = workers.iter().map(|w| w.heap()).collect();
    snapshot(rt, &all_roots(rt, workers), &heaps)
}

/// [`sweep_check`] over all workers.
pub fn sweep_all(rt: &Runtime, workers: &[&Worker<'_>]) -> Vec<Violation> {
    let heaps: Vec<&LocalHeap> = workers.iter().map(|w| w.heap()).collect();
    let roots: Vec<&[Reference]> = workers.iter().map(|w| w.roots().as_slice()).collect();
    sweep_check(rt, &heaps, &roots)
}
