//! A split local/global heap collector with NUMA-aware chunk placement.
//!
//! Each worker owns a fixed-size [`LocalHeap`] with a nursery and an old
//! area. Minor collections copy the nursery into the old area; major
//! collections move older data into the worker's current chunk of the
//! shared global heap. Objects become visible to other workers only through
//! [`Worker::promote`]. The global heap is collected by all workers
//! together in a stop-the-world parallel copy (see [`protocol`]).

pub mod chunk;
pub mod error;
mod global;
pub mod local;
pub mod memory;
pub mod object;
pub mod oracle;
pub mod protocol;
pub mod runtime;
pub mod topology;
pub mod worker;
pub mod workload;

pub use chunk::{ChunkEvent, ChunkEventKind, ChunkId, ChunkManager, ChunkState, GlobalChunk, WorkerId};
pub use error::{AllocError, GcError, ObjectError, Result};
pub use local::{AllocationWindow, Block, LocalHeap, MinorStats, RootSet};
pub use object::{
    decode_header, encode_header, DescriptorTable, HeaderWord, ObjectDescriptor, ObjectHeader,
    ObjectKind, Reference,
};
pub use oracle::{GraphSnapshot, Violation, ViolationKind};
pub use protocol::{BalanceMode, Collector, GcController, GlobalGcStats, SequentialCollector, ThreadedCollector};
pub use runtime::{Runtime, RuntimeConfig};
pub use topology::{NodeId, NumaMode, PlacementPolicy, Topology};
pub use worker::{MajorStats, PromotionResult, Worker, WorkerStats};
