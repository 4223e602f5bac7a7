//! Node-tagged chunks of the global heap.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{GcError, Result};
use crate::object::WORD_BYTES;
use crate::topology::{NodeId, PlacementPolicy, Topology};

pub type ChunkId = usize;
pub type WorkerId = usize;

const NO_WORKER: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "worker")]
pub enum ChunkState {
    Free,
    /// Allocation target of one worker; nobody else writes it.
    Current(WorkerId),
    /// Exhausted allocation target outside a collection.
    Filled,
    FromSpace,
    ToSpaceUnscanned,
    ToSpaceScanned,
}

impl ChunkState {
    fn pack(self) -> u64 {
        match self {
            ChunkState::Free => 0,
            ChunkState::Current(w) => 1 | ((w as u64) << 8),
            ChunkState::Filled => 2,
            ChunkState::FromSpace => 3,
            ChunkState::ToSpaceUnscanned => 4,
            ChunkState::ToSpaceScanned => 5,
        }
    }

    fn unpack(word: u64) -> Self {
        match word & 0xff {
            0 => ChunkState::Free,
            1 => ChunkState::Current((word >> 8) as usize),
            2 => ChunkState::Filled,
            3 => ChunkState::FromSpace,
            4 => ChunkState::ToSpaceUnscanned,
            5 => ChunkState::ToSpaceScanned,
            t => unreachable!("corrupt chunk state tag {t}"),
        }
    }
}

#[derive(Debug)]
pub struct GlobalChunk {
    id: ChunkId,
    base: usize,
    limit: usize,
    node: AtomicUsize,
    top: AtomicUsize,
    scan: AtomicUsize,
    producer: AtomicUsize,
    state: AtomicU64,
}

impl GlobalChunk {
    pub fn id(&self) -> ChunkId {
        self.id
    }
    pub fn base(&self) -> usize {
        self.base
    }
    pub fn limit(&self) -> usize {
        self.limit
    }
    pub fn node(&self) -> NodeId {
        self.node.load(Ordering::Relaxed)
    }
    pub fn top(&self) -> usize {
        self.top.load(Ordering::Acquire)
    }
    pub fn used_bytes(&self) -> usize {
        self.top() - self.base
    }
    pub fn state(&self) -> ChunkState {
        ChunkState::unpack(self.state.load(Ordering::Acquire))
    }
    pub(crate) fn set_state(&self, s: ChunkState) {
        self.state.store(s.pack(), Ordering::Release)
    }
    /// Worker that last allocated into this chunk.
    pub fn producer(&self) -> Option<WorkerId> {
        match self.producer.load(Ordering::Relaxed) {
            NO_WORKER => None,
            w => Some(w),
        }
    }
    pub(crate) fn scan(&self) -> usize {
        self.scan.load(Ordering::Relaxed)
    }
    pub(crate) fn set_scan(&self, addr: usize) {
        self.scan.store(addr, Ordering::Relaxed)
    }
    pub fn contains(&self, addr: usize) -> bool {
        addr >= self.base && addr < self.limit
    }

    /// Bump-allocates `bytes` at the top. Only the owning worker calls this.
    #[inline]
    pub(crate) fn try_bump(&self, bytes: usize) -> Option<usize> {
        let top = self.top.load(Ordering::Relaxed);
        if top + bytes <= self.limit {
            self.top.store(top + bytes, Ordering::Release);
            Some(top)
        } else {
            None
        }
    }

    /// Gives back the most recent allocation starting at `start`.
    pub(crate) fn unbump(&self, start: usize) {
        debug_assert!(start >= self.base && start <= self.top.load(Ordering::Relaxed));
        self.top.store(start, Ordering::Release);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkEventKind {
    /// Freshly mapped from the arena.
    Acquire,
    /// Taken from a node's free list.
    Reuse,
    /// Returned to its node's free list after a collection.
    Retire,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkEvent {
    pub event: ChunkEventKind,
    pub chunk: ChunkId,
    pub node: NodeId,
    pub worker: Option<WorkerId>,
}

/// Result of [`ChunkManager::get_chunk`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Acquired {
    pub chunk: ChunkId,
    pub node: NodeId,
    pub fresh: bool,
}

pub struct ChunkManager {
    arena_base: usize,
    arena_end: usize,
    chunk_bytes: usize,
    chunks: Box<[GlobalChunk]>,
    free: Vec<Mutex<Vec<ChunkId>>>,
    in_use: Vec<Mutex<Vec<ChunkId>>>,
    next_fresh: Mutex<usize>,
    in_use_bytes: AtomicU64,
    mapped_bytes: AtomicU64,
    trace: Option<Mutex<Vec<ChunkEvent>>>,
}

impl std::fmt::Debug for ChunkManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChunkManager")
            .field("arena_base", &format_args!("{:#x}", self.arena_base))
            .field("chunk_bytes", &self.chunk_bytes)
            .field("in_use_bytes", &self.in_use_bytes())
            .finish_non_exhaustive()
    }
}

impl ChunkManager {
    /// Carves `[arena_base, arena_base + arena_bytes)` into chunks. The range
    /// must stay mapped for the manager's lifetime.
    pub fn new(
        nodes: usize,
        chunk_bytes: usize,
        arena_base: usize,
        arena_bytes: usize,
        trace: bool,
    ) -> Result<Self> {
        if chunk_bytes == 0 || !chunk_bytes.is_multiple_of(WORD_BYTES) {
            return Err(GcError::Config(format!(
                "chunk size {chunk_bytes} must be a positive multiple of {WORD_BYTES}"
            )));
        }
        let capacity = arena_bytes / chunk_bytes;
        if capacity == 0 {
            return Err(GcError::Config(format!(
                "global arena of {arena_bytes} bytes holds no {chunk_bytes}-byte chunk"
            )));
        }
        let chunks = (0..capacity)
            .map(|id| {
                let base = arena_base + id * chunk_bytes;
                GlobalChunk {
                    id,
                    base,
                    limit: base + chunk_bytes,
                    node: AtomicUsize::new(0),
                    top: AtomicUsize::new(base),
                    scan: AtomicUsize::new(base),
                    producer: AtomicUsize::new(NO_WORKER),
                    state: AtomicU64::new(ChunkState::Free.pack()),
                }
            })
            .collect();
        Ok(ChunkManager {
            arena_base,
            arena_end: arena_base + capacity * chunk_bytes,
            chunk_bytes,
            chunks,
            free: (0..nodes).map(|_| Mutex::new(Vec::new())).collect(),
            in_use: (0..nodes).map(|_| Mutex::new(Vec::new())).collect(),
            next_fresh: Mutex::new(0),
            in_use_bytes: AtomicU64::new(0),
            mapped_bytes: AtomicU64::new(0),
            trace: trace.then(|| Mutex::new(Vec::new())),
        })
    }

    /// Address range covered by chunks.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.arena_base..self.arena_end
    }

    pub fn chunk_bytes(&self) -> usize {
        self.chunk_bytes
    }

    pub fn capacity(&self) -> usize {
        self.chunks.len()
    }

    pub fn nodes(&self) -> usize {
        self.free.len()
    }

    #[inline]
    pub fn chunk(&self, id: ChunkId) -> &GlobalChunk {
        &self.chunks[id]
    }

    /// Chunk whose address range holds `addr`, whatever its state.
    #[inline]
    pub fn chunk_of(&self, addr: usize) -> Option<&GlobalChunk> {
        if addr >= self.arena_base && addr < self.arena_end {
            self.chunks.get((addr - self.arena_base) / self.chunk_bytes)
        } else {
            None
        }
    }

    /// Bytes held by chunks that are not on a free list. Drives the
    /// global-collection trigger.
    pub fn in_use_bytes(&self) -> u64 {
        self.in_use_bytes.load(Ordering::SeqCst)
    }

    /// Bytes ever mapped from the arena; only fresh chunks add to it.
    pub fn mapped_bytes(&self) -> u64 {
        self.mapped_bytes.load(Ordering::Relaxed)
    }

    /// Hands `worker` a chunk on the node chosen by `policy`. Reuse takes
    /// only that node's free-list lock; a fresh chunk takes the global lock.
    pub fn get_chunk(
        &self,
        topology: &Topology,
        policy: PlacementPolicy,
        requesting: NodeId,
        worker: WorkerId,
    ) -> Result<Acquired> {
        let node = topology.place(policy, requesting);
        let reused = self.free[node].lock().pop();
        let (id, fresh) = match reused {
            Some(id) => (id, false),
            None => {
                let id = {
                    let mut next = self.next_fresh.lock();
                    if *next == self.chunks.len() {
                        return Err(GcError::GlobalHeapExhausted {
                            chunks: self.chunks.len(),
                        });
                    }
                    *next += 1;
                    *next - 1
                };
                let c = &self.chunks[id];
                c.node.store(node, Ordering::Relaxed);
                topology.bind_memory(c.base, self.chunk_bytes, node);
                self.mapped_bytes
                    .fetch_add(self.chunk_bytes as u64, Ordering::Relaxed);
                (id, true)
            }
        };
        let c = &self.chunks[id];
        debug_assert_eq!(c.node(), node);
        debug_assert_eq!(c.state(), ChunkState::Free);
        c.top.store(c.base, Ordering::Relaxed);
        c.scan.store(c.base, Ordering::Relaxed);
        c.producer.store(worker, Ordering::Relaxed);
        c.set_state(ChunkState::Current(worker));
        self.in_use[node].lock().push(id);
        self.in_use_bytes
            .fetch_add(self.chunk_bytes as u64, Ordering::SeqCst);
        self.record(ChunkEvent {
            event: if fresh {
                ChunkEventKind::Acquire
            } else {
                ChunkEventKind::Reuse
            },
            chunk: id,
            node,
            worker: Some(worker),
        });
        Ok(Acquired {
            chunk: id,
            node,
            fresh,
        })
    }

    /// Moves every registered chunk to from-space, grouped by node.
    pub(crate) fn take_in_use(&self) -> Vec<Vec<ChunkId>> {
        self.in_use
            .iter()
            .map(|l| {
                let ids = std::mem::take(&mut *l.lock());
                for &id in &ids {
                    self.chunks[id].set_state(ChunkState::FromSpace);
                }
                ids
            })
            .collect()
    }

    /// Returns a chunk to its own node's free list.
    pub(crate) fn release(&self, id: ChunkId) {
        let c = &self.chunks[id];
        c.set_state(ChunkState::Free);
        c.producer.store(NO_WORKER, Ordering::Relaxed);
        self.free[c.node()].lock().push(id);
        self.in_use_bytes
            .fetch_sub(self.chunk_bytes as u64, Ordering::SeqCst);
        self.record(ChunkEvent {
            event: ChunkEventKind::Retire,
            chunk: id,
            node: c.node(),
            worker: None,
        });
    }

    /// Snapshot of the registered (in-use) chunks.
    pub fn in_use_chunks(&self) -> Vec<ChunkId> {
        let mut all: Vec<ChunkId> = self.in_use.iter().flat_map(|l| l.lock().clone()).collect();
        all.sort_unstable();
        all
    }

    pub fn free_chunks(&self, node: NodeId) -> Vec<ChunkId> {
        self.free[node].lock().clone()
    }

    /// Chunks that have ever been handed out.
    pub fn touched(&self) -> usize {
        *self.next_fresh.lock()
    }

    fn record(&self, ev: ChunkEvent) {
        if let Some(t) = &self.trace {
            t.lock().push(ev);
        }
    }

    pub fn take_events(&self) -> Vec<ChunkEvent> {
        self.trace
            .as_ref()
            .map(|t| std::mem::take(&mut *t.lock()))
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Arena;
    use std::sync::Arc;

    fn mgr_in(arena: &Arena, nodes: usize, chunk: usize, trace: bool) -> ChunkManager {
        ChunkManager::new(nodes, chunk, arena.base(), arena.len(), trace).unwrap()
    }

    fn mgr(arena: &Arena, nodes: usize) -> ChunkManager {
        mgr_in(arena, nodes, 4096, true)
    }

    fn arena(chunks: usize) -> Arena {
        Arena::reserve(chunks * 4096).unwrap()
    }

    #[test]
    fn state_packing() {
        for s in [
            ChunkState::Free,
            ChunkState::Current(0),
            ChunkState::Current(12345),
            ChunkState::Filled,
            ChunkState::FromSpace,
            ChunkState::ToSpaceUnscanned,
            ChunkState::ToSpaceScanned,
        ] {
            assert_eq!(ChunkState::unpack(s.pack()), s);
        }
    }

    #[test]
    fn cold_start_maps_fresh_chunk() {
        let t = Topology::simulated(2, 1).unwrap();
        let ar = arena(64);
        let m = mgr(&ar, 2);
        let a = m.get_chunk(&t, PlacementPolicy::LocalNode, 1, 0).unwrap();
        assert!(a.fresh);
        assert_eq!(a.node, 1);
        assert_eq!(m.in_use_bytes(), 4096);
        assert_eq!(m.mapped_bytes(), 4096);
        assert_eq!(m.chunk(a.chunk).state(), ChunkState::Current(0));
    }

    #[test]
    fn reuse_preserves_node() {
        let t = Topology::simulated(2, 1).unwrap();
        let ar = arena(64);
        let m = mgr(&ar, 2);
        let a = m.get_chunk(&t, PlacementPolicy::LocalNode, 0, 0).unwrap();
        m.take_in_use();
        m.release(a.chunk);
        assert_eq!(m.free_chunks(0), vec![a.chunk]);
        let b = m.get_chunk(&t, PlacementPolicy::LocalNode, 0, 1).unwrap();
        assert_eq!(b.chunk, a.chunk);
        assert!(!b.fresh);
        assert_eq!(m.chunk(b.chunk).node(), 0);
        assert_eq!(m.mapped_bytes(), 4096);
        let evs: Vec<_> = m.take_events().into_iter().map(|e| e.event).collect();
        assert_eq!(
            evs,
            vec![ChunkEventKind::Acquire, ChunkEventKind::Retire, ChunkEventKind::Reuse]
        );
    }

    #[test]
    fn node_with_empty_free_list_maps_fresh() {
        let t = Topology::simulated(2, 1).unwrap();
        let ar = arena(64);
        let m = mgr(&ar, 2);
        let a = m.get_chunk(&t, PlacementPolicy::LocalNode, 0, 0).unwrap();
        m.take_in_use();
        m.release(a.chunk);
        let b = m.get_chunk(&t, PlacementPolicy::LocalNode, 1, 0).unwrap();
        assert!(b.fresh);
        assert_ne!(b.chunk, a.chunk);
    }

    #[test]
    fn exhaustion() {
        let t = Topology::simulated(1, 1).unwrap();
        let ar = arena(2);
        let m = mgr_in(&ar, 1, 4096, false);
        m.get_chunk(&t, PlacementPolicy::LocalNode, 0, 0).unwrap();
        m.get_chunk(&t, PlacementPolicy::LocalNode, 0, 0).unwrap();
        assert!(matches!(
            m.get_chunk(&t, PlacementPolicy::LocalNode, 0, 0),
            Err(GcError::GlobalHeapExhausted { chunks: 2 })
        ));
    }

    #[test]
    fn bump_within_limit() {
        let t = Topology::simulated(1, 1).unwrap();
        let ar = arena(64);
        let m = mgr(&ar, 1);
        let c = m.chunk(m.get_chunk(&t, PlacementPolicy::LocalNode, 0, 0).unwrap().chunk);
        assert_eq!(c.try_bump(4000), Some(c.base()));
        assert_eq!(c.try_bump(100), None);
        c.unbump(c.base());
        assert_eq!(c.used_bytes(), 0);
    }

    #[test]
    fn racing_acquisitions_are_distinct() {
        let t = Arc::new(Topology::simulated(1, 1).unwrap());
        let ar = arena(1024);
        let m = Arc::new(mgr_in(&ar, 1, 4096, false));
        let handles: Vec<_> = (0..4)
            .map(|w| {
                let (t, m) = (t.clone(), m.clone());
                std::thread::spawn(move || {
                    (0..200)
                        .map(|_| m.get_chunk(&t, PlacementPolicy::LocalNode, 0, w).unwrap().chunk)
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<_> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 800);
        assert_eq!(m.in_use_bytes(), 800 * 4096);
        assert_eq!(m.in_use_chunks().len(), 800);
    }
}
