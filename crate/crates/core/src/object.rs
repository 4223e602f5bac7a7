//! Heap object representation.
//!
//! Every heap object starts with a single 64-bit header word:
//!
//! ```text
//!  63                                16 15            1   0
//! +------------------------------------+---------------+---+
//! |          length (48 bits)          |  id (15 bits) | 1 |
//! +------------------------------------+---------------+---+
//! ```
//!
//! A word whose low bit is clear is a forwarding word: the address of the
//! object's new copy. Lengths count payload words and exclude the header.
//! Two ids are reserved for raw data and pointer vectors; every other id
//! indexes the [`DescriptorTable`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ObjectError;

/// Bytes per heap word.
pub const WORD_BYTES: usize = 8;

/// Reserved id for raw (pointer-free) objects.
pub const RAW_ID: u16 = 1;
/// Reserved id for vectors of pointers.
pub const VECTOR_ID: u16 = 2;

pub const ID_BITS: u32 = 15;
pub const LENGTH_BITS: u32 = 48;
pub const ID_SHIFT: u32 = 1;
pub const LENGTH_SHIFT: u32 = 16;
pub const MAX_ID: u16 = (1 << ID_BITS) - 1;
pub const MAX_LENGTH: u64 = (1 << LENGTH_BITS) - 1;

const ID_MASK: u64 = (MAX_ID as u64) << ID_SHIFT;

/// A heap address of an object's first payload word, or null.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[repr(transparent)]
#[serde(transparent)]
pub struct Reference(u64);

impl Reference {
    pub const NULL: Reference = Reference(0);

    /// Wraps a raw word. No validation beyond what the caller knows.
    #[inline]
    pub const fn from_raw(word: u64) -> Self {
        Reference(word)
    }

    #[inline]
    pub fn from_addr(addr: usize) -> Self {
        Reference(addr as u64)
    }

    #[inline]
    pub const fn raw(self) -> u64 {
        self.0
    }

    #[inline]
    pub const fn addr(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub const fn is_null(self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub const fn is_aligned(self) -> bool {
        self.0.is_multiple_of(WORD_BYTES as u64)
    }

    /// Address of the header slot, one word before the payload.
    #[inline]
    pub const fn header_addr(self) -> usize {
        self.0 as usize - WORD_BYTES
    }

    /// Address of payload field `index`.
    #[inline]
    pub const fn field_addr(self, index: usize) -> usize {
        self.0 as usize + index * WORD_BYTES
    }
}

impl fmt::Debug for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            f.write_str("null")
        } else {
            write!(f, "{:#x}", self.0)
        }
    }
}

/// What an object holds, as named by its header id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectKind {
    Raw,
    Vector,
    /// Mixed pointer/non-pointer object; the value is the descriptor id.
    Mixed(u16),
}

impl ObjectKind {
    /// Header id for this kind.
    pub fn id(self) -> u16 {
        match self {
            ObjectKind::Raw => RAW_ID,
            ObjectKind::Vector => VECTOR_ID,
            ObjectKind::Mixed(id) => id,
        }
    }

    /// Classifies an id without consulting a descriptor table.
    pub fn from_id(id: u16) -> Self {
        match id {
            RAW_ID => ObjectKind::Raw,
            VECTOR_ID => ObjectKind::Vector,
            other => ObjectKind::Mixed(other),
        }
    }
}

/// A valid header word (bit 0 set).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct ObjectHeader(u64);

impl ObjectHeader {
    /// Packs `kind` and `length` without descriptor validation.
    ///
    /// Rejects ids wider than 15 bits, lengths of 2^48 or more, and zero
    /// lengths (a header-only object would alias its neighbour's reference).
    pub fn encode(kind: ObjectKind, length: u64) -> Result<Self, ObjectError> {
        let id = kind.id();
        if id > MAX_ID {
            return Err(ObjectError::IdOverflow(id));
        }
        if length > MAX_LENGTH {
            return Err(ObjectError::LengthOverflow(length));
        }
        if length == 0 {
            return Err(ObjectError::ZeroLength(kind));
        }
        Ok(ObjectHeader(
            (length << LENGTH_SHIFT) | ((id as u64) << ID_SHIFT) | 1,
        ))
    }

    /// Reinterprets a word known to be a header. Panics in debug builds on
    /// an even word.
    #[inline]
    pub fn from_word_unchecked(word: u64) -> Self {
        debug_assert!(word & 1 == 1, "not a header word: {word:#x}");
        ObjectHeader(word)
    }

    #[inline]
    pub const fn raw(self) -> u64 {
        self.0
    }

    #[inline]
    pub const fn id(self) -> u16 {
        ((self.0 & ID_MASK) >> ID_SHIFT) as u16
    }

    #[inline]
    pub fn kind(self) -> ObjectKind {
        ObjectKind::from_id(self.id())
    }

    /// Payload length in words.
    #[inline]
    pub const fn length(self) -> u64 {
        self.0 >> LENGTH_SHIFT
    }

    /// Header plus payload, in bytes.
    #[inline]
    pub const fn object_bytes(self) -> usize {
        (self.length() as usize + 1) * WORD_BYTES
    }
}

impl fmt::Debug for ObjectHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ObjectHeader({:?}, len {}, {:#018x})",
            self.kind(),
            self.length(),
            self.0
        )
    }
}

/// Classification of a word read from a header slot. Bit 0 decides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeaderWord {
    Object(ObjectHeader),
    Forwarded(Reference),
}

impl HeaderWord {
    #[inline]
    pub fn classify(word: u64) -> Self {
        if word & 1 == 1 {
            HeaderWord::Object(ObjectHeader(word))
        } else {
            HeaderWord::Forwarded(Reference(word))
        }
    }
}

/// Layout record for a mixed object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDescriptor {
    pub id: u16,
    pub field_count: u32,
    pub pointer_fields: Vec<u32>,
}

impl ObjectDescriptor {
    pub fn new(id: u16, field_count: u32, pointer_fields: Vec<u32>) -> Result<Self, ObjectError> {
        let desc = ObjectDescriptor {
            id,
            field_count,
            pointer_fields,
        };
        desc.validate()?;
        Ok(desc)
    }

    fn validate(&self) -> Result<(), ObjectError> {
        if self.id == RAW_ID || self.id == VECTOR_ID || self.id > MAX_ID {
            return Err(ObjectError::ReservedDescriptorId(self.id));
        }
        if self.field_count == 0 {
            return Err(ObjectError::BadDescriptor {
                id: self.id,
                reason: "field_count must be at least 1".into(),
            });
        }
        let mut prev: Option<u32> = None;
        for &f in &self.pointer_fields {
            if f >= self.field_count {
                return Err(ObjectError::BadDescriptor {
                    id: self.id,
                    reason: format!("pointer field {f} >= field_count {}", self.field_count),
                });
            }
            if prev.is_some_and(|p| p >= f) {
                return Err(ObjectError::BadDescriptor {
                    id: self.id,
                    reason: "pointer fields must be strictly increasing".into(),
                });
            }
            prev = Some(f);
        }
        Ok(())
    }

    pub fn is_pointer_field(&self, index: u32) -> bool {
        self.pointer_fields.binary_search(&index).is_ok()
    }
}

/// Immutable table of mixed-object descriptors, indexed by id.
#[derive(Clone, Debug, Default)]
pub struct DescriptorTable {
    slots: Vec<Option<ObjectDescriptor>>,
}

impl DescriptorTable {
    pub fn new(descriptors: impl IntoIterator<Item = ObjectDescriptor>) -> Result<Self, ObjectError> {
        let mut slots: Vec<Option<ObjectDescriptor>> = Vec::new();
        for desc in descriptors {
            desc.validate()?;
            let idx = desc.id as usize;
            if slots.len() <= idx {
                slots.resize(idx + 1, None);
            }
            if slots[idx].is_some() {
                return Err(ObjectError::DuplicateDescriptor(desc.id));
            }
            slots[idx] = Some(desc);
        }
        Ok(DescriptorTable { slots })
    }

    #[inline]
    pub fn get(&self, id: u16) -> Option<&ObjectDescriptor> {
        self.slots.get(id as usize).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ObjectDescriptor> {
        self.slots.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that `kind` resolves and that `length` fits its layout.
    pub fn check_kind(&self, kind: ObjectKind, length: u64) -> Result<(), ObjectError> {
        match kind {
            ObjectKind::Raw | ObjectKind::Vector => Ok(()),
            ObjectKind::Mixed(id) => {
                let desc = self.get(id).ok_or(ObjectError::UnknownDescriptor(id))?;
                if desc.field_count as u64 != length {
                    Err(ObjectError::FieldCountMismatch {
                        id,
                        expected: desc.field_count,
                        got: length,
                    })
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Calls `visit` with the index of every pointer field of an object
    /// with this header, in ascending order.
    #[inline]
    pub fn for_each_pointer_field(
        &self,
        header: ObjectHeader,
        mut visit: impl FnMut(usize),
    ) -> Result<(), ObjectError> {
        match header.kind() {
            ObjectKind::Raw => Ok(()),
            ObjectKind::Vector => {
                (0..header.length() as usize).for_each(visit);
                Ok(())
            }
            ObjectKind::Mixed(id) => {
                let desc = self.get(id).ok_or(ObjectError::UnknownDescriptor(id))?;
                for &f in &desc.pointer_fields {
                    visit(f as usize);
                }
                Ok(())
            }
        }
    }
}

/// Encodes a header after validating `kind` against `table`.
pub fn encode_header(
    kind: ObjectKind,
    length: u64,
    table: &DescriptorTable,
) -> Result<ObjectHeader, ObjectError> {
    let header = ObjectHeader::encode(kind, length)?;
    table.check_kind(kind, length)?;
    Ok(header)
}

/// Decodes a header-slot word, validating mixed ids against `table`.
pub fn decode_header(word: u64, table: &DescriptorTable) -> Result<HeaderWord, ObjectError> {
    let decoded = HeaderWord::classify(word);
    if let HeaderWord::Object(h) = decoded {
        if let ObjectKind::Mixed(id) = h.kind() {
            if table.get(id).is_none() {
                return Err(ObjectError::UnknownDescriptor(id));
            }
        }
    }
    Ok(decoded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> DescriptorTable {
        DescriptorTable::new([
            ObjectDescriptor::new(3, 3, vec![1, 2]).unwrap(),
            ObjectDescriptor::new(4, 4, vec![1, 3]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn raw_header_word() {
        let h = encode_header(ObjectKind::Raw, 2, &table()).unwrap();
        assert_eq!(h.raw(), (2 << 16) | (1 << 1) | 1);
        assert_eq!(h.raw(), 0x0000_0000_0002_0003);
    }

    #[test]
    fn mixed_header_word() {
        let h = encode_header(ObjectKind::Mixed(3), 3, &table()).unwrap();
        assert_eq!(h.raw(), 0x0000_0000_0003_0007);
        match decode_header(0x0003_0007, &table()).unwrap() {
            HeaderWord::Object(h) => {
                assert_eq!(h.kind(), ObjectKind::Mixed(3));
                assert_eq!(h.length(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_length_vector_rejected() {
        assert!(matches!(
            encode_header(ObjectKind::Vector, 0, &table()),
            Err(ObjectError::ZeroLength(ObjectKind::Vector))
        ));
    }

    #[test]
    fn even_word_is_forwarded() {
        assert_eq!(
            decode_header(0x1000, &table()).unwrap(),
            HeaderWord::Forwarded(Reference::from_raw(0x1000))
        );
    }

    #[test]
    fn errors() {
        let t = table();
        assert!(matches!(
            encode_header(ObjectKind::Raw, 1 << 48, &t),
            Err(ObjectError::LengthOverflow(_))
        ));
        assert!(matches!(
            encode_header(ObjectKind::Mixed(9), 1, &t),
            Err(ObjectError::UnknownDescriptor(9))
        ));
        assert!(matches!(
            encode_header(ObjectKind::Mixed(3), 4, &t),
            Err(ObjectError::FieldCountMismatch { .. })
        ));
        let w = ObjectHeader::encode(ObjectKind::Mixed(77), 5).unwrap().raw();
        assert!(matches!(
            decode_header(w, &t),
            Err(ObjectError::UnknownDescriptor(77))
        ));
    }

    #[test]
    fn descriptor_validation() {
        assert!(ObjectDescriptor::new(RAW_ID, 2, vec![]).is_err());
        assert!(ObjectDescriptor::new(VECTOR_ID, 2, vec![]).is_err());
        assert!(ObjectDescriptor::new(5, 2, vec![2]).is_err());
        assert!(ObjectDescriptor::new(5, 4, vec![2, 1]).is_err());
        assert!(ObjectDescriptor::new(5, 4, vec![1, 1]).is_err());
        let d = ObjectDescriptor::new(5, 4, vec![0, 3]).unwrap();
        assert!(DescriptorTable::new([d.clone(), d]).is_err());
    }

    fn visited(t: &DescriptorTable, kind: ObjectKind, len: u64) -> Vec<usize> {
        let h = ObjectHeader::encode(kind, len).unwrap();
        let mut out = Vec::new();
        t.for_each_pointer_field(h, |i| out.push(i)).unwrap();
        out
    }

    #[test]
    fn scan_by_kind() {
        let t = table();
        assert!(visited(&t, ObjectKind::Raw, 4).is_empty());
        assert_eq!(visited(&t, ObjectKind::Vector, 3), vec![0, 1, 2]);
        assert_eq!(visited(&t, ObjectKind::Mixed(4), 4), vec![1, 3]);
    }

    prop_compose! {
        fn any_descriptor()(count in 1u32..64)
            (mask in proptest::collection::vec(any::<bool>(), count as usize), count in Just(count), id in 3u16..=MAX_ID)
            -> ObjectDescriptor {
            let ptrs = mask.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i as u32).collect();
            ObjectDescriptor::new(id, count, ptrs).unwrap()
        }
    }

    proptest! {
        #[test]
        fn header_round_trip(id in 0u16..=MAX_ID, len in 1u64..=MAX_LENGTH) {
            let kind = ObjectKind::from_id(id);
            let h = ObjectHeader::encode(kind, len).unwrap();
            prop_assert_eq!(h.raw() & 1, 1);
            match HeaderWord::classify(h.raw()) {
                HeaderWord::Object(d) => {
                    prop_assert_eq!(d.kind(), kind);
                    prop_assert_eq!(d.length(), len);
                }
                HeaderWord::Forwarded(_) => prop_assert!(false),
            }
        }

        #[test]
        fn parity_partitions_words(word in any::<u64>()) {
            let is_obj = matches!(HeaderWord::classify(word), HeaderWord::Object(_));
            prop_assert_eq!(is_obj, word & 1 == 1);
        }

        #[test]
        fn scan_matches_declared_pointers(desc in any_descriptor()) {
            let t = DescriptorTable::new([desc.clone()]).unwrap();
            let got = visited(&t, ObjectKind::Mixed(desc.id), desc.field_count as u64);
            // naive oracle: every field, filtered by membership
            let naive: Vec<usize> = (0..desc.field_count)
                .filter(|f| desc.pointer_fields.contains(f))
                .map(|f| f as usize)
                .collect();
            prop_assert_eq!(got, naive);
        }
    }
}
