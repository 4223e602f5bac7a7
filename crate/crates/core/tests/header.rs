use nodegc::object::{MAX_ID, MAX_LENGTH};
use nodegc::{decode_header, encode_header, DescriptorTable, HeaderWord, ObjectDescriptor, ObjectHeader, ObjectKind};
use proptest::prelude::*;

fn kind(id: u16) -> ObjectKind {
    ObjectKind::from_id(id)
}

#[test]
fn mixed_three_example() {
    let h = ObjectHeader::encode(ObjectKind::Mixed(3), 3).unwrap();
    assert_eq!(h.raw(), 0x0000_0000_0003_0007);
    let back = ObjectHeader::from_word_unchecked(0x0003_0007);
    assert_eq!((back.kind(), back.length()), (ObjectKind::Mixed(3), 3));
}

#[test]
fn even_words_are_not_headers() {
    assert!(matches!(HeaderWord::classify(0x1000), HeaderWord::Forwarded(_)));
    assert!(matches!(HeaderWord::classify(0x1001), HeaderWord::Object(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2048))]

    #[test]
    fn encoding_matches_bit_layout(id in 1u16..=MAX_ID, len in 1u64..=MAX_LENGTH) {
        let h = ObjectHeader::encode(kind(id), len).unwrap();
        prop_assert_eq!(h.raw(), (len << 16) | ((id as u64) << 1) | 1);
        prop_assert_eq!(h.raw() & 1, 1);
        let back = ObjectHeader::from_word_unchecked(h.raw());
        prop_assert_eq!(back.kind(), kind(id));
        prop_assert_eq!(back.length(), len);
    }

    #[test]
    fn pointer_fields_match_descriptor(mask in prop::collection::vec(any::<bool>(), 1..24)) {
        let ptrs: Vec<u32> = (0..mask.len() as u32).filter(|&i| mask[i as usize]).collect();
        let d = ObjectDescriptor::new(9, mask.len() as u32, ptrs.clone()).unwrap();
        let table = DescriptorTable::new([d]).unwrap();
        let h = encode_header(ObjectKind::Mixed(9), mask.len() as u64, &table).unwrap();
        let mut seen = Vec::new();
        table.for_each_pointer_field(h, |i| seen.push(i as u32)).unwrap();
        prop_assert_eq!(seen, ptrs);
        prop_assert!(matches!(decode_header(h.raw(), &table), Ok(HeaderWord::Object(_))));
        prop_assert!(decode_header(ObjectHeader::encode(ObjectKind::Mixed(10), 1).unwrap().raw(), &table).is_err());
        let v = encode_header(ObjectKind::Vector, mask.len() as u64, &table).unwrap();
        let mut all = Vec::new();
        table.for_each_pointer_field(v, |i| all.push(i)).unwrap();
        prop_assert_eq!(all, (0..mask.len()).collect::<Vec<_>>());
        let r = encode_header(ObjectKind::Raw, mask.len() as u64, &table).unwrap();
        let mut none = 0;
        table.for_each_pointer_field(r, |_| none += 1).unwrap();
        prop_assert_eq!(none, 0);
    }
}

#[test]
fn mixed_length_must_match_descriptor() {
    let table = DescriptorTable::new([ObjectDescriptor::new(5, 4, vec![1, 3]).unwrap()]).unwrap();
    assert!(encode_header(ObjectKind::Mixed(5), 3, &table).is_err());
    assert!(encode_header(ObjectKind::Raw, 0, &table).is_err());
    assert!(encode_header(ObjectKind::Mixed(5), 4, &table).is_ok());
}
