use thiserror::Error;

use crate::object::{ObjectKind, Reference};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ObjectError {
    #[error("object length {0} does not fit in 48 bits")]
    LengthOverflow(u64),
    #[error("object id {0} does not fit in 15 bits")]
    IdOverflow(u16),
    #[error("zero-length {0:?} object")]
    ZeroLength(ObjectKind),
    #[error("unknown object descriptor {0}")]
    UnknownDescriptor(u16),
    #[error("descriptor id {0} is reserved")]
    ReservedDescriptorId(u16),
    #[error("duplicate descriptor id {0}")]
    DuplicateDescriptor(u16),
    #[error("descriptor {id}: {reason}")]
    BadDescriptor { id: u16, reason: String },
    #[error("descriptor {id} has {expected} fields, object length is {got}")]
    FieldCountMismatch { id: u16, expected: u32, got: u64 },
    #[error("expected {expected} initial fields, got {got}")]
    FieldArity { expected: usize, got: usize },
}

/// Outcome of a failed limit test.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum AllocError {
    #[error("nursery exhausted; minor collection required")]
    MinorGcRequired,
    #[error("allocation limit is zero; global collection requested")]
    GlobalGcRequested,
}

#[derive(Debug, Error)]
pub enum GcError {
    #[error(transparent)]
    Object(#[from] ObjectError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("local heap of worker {worker} cannot satisfy {bytes} bytes after full local collection")]
    LocalHeapExhausted { worker: usize, bytes: usize },
    #[error("copied data would overflow the local heap; major collection required")]
    MajorGcRequired,
    #[error("object of {bytes} bytes exceeds the {limit}-byte chunk payload")]
    ObjectTooLarge { bytes: usize, limit: usize },
    #[error("global heap exhausted: all {chunks} chunks are in use")]
    GlobalHeapExhausted { chunks: usize },
    #[error("host refused memory: {0}")]
    HostMemory(String),
    #[error("forwarded header encountered at {0:?}")]
    Forwarded(Reference),
    #[error("{0:?} is not a local object of this worker")]
    NotLocal(Reference),
    #[error("global objects are immutable; cannot write {0:?}")]
    GlobalMutation(Reference),
    #[error("value {value:?} would create a pointer into worker {owner}'s local heap")]
    ForeignPointer { value: Reference, owner: usize },
    #[error("field {index} out of bounds for object of length {length}")]
    FieldOutOfBounds { index: usize, length: u64 },
    #[error("balance mode cannot change while a collection is in progress")]
    CollectionInProgress,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("topology: {0}")]
    Topology(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T, E = GcError> = std::result::Result<T, E>;
