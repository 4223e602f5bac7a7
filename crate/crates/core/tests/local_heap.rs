mod common;

use common::*;
use nodegc::{ObjectKind, Reference, SequentialCollector};
use proptest::prelude::*;

#[derive(Clone, Debug)]
enum Op {
    Alloc(usize),
    Keep,
    Drop,
    Minor,
    Major,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => (1usize..12).prop_map(Op::Alloc),
        2 => Just(Op::Keep),
        2 => Just(Op::Drop),
        1 => Just(Op::Minor),
        1 => Just(Op::Major),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn nursery_is_upper_half_after_every_minor(ops in prop::collection::vec(op(), 1..400)) {
        let mut cfg = config(1);
        cfg.local_heap_bytes = 8 * 1024;
        let rt = runtime(cfg);
        let mut ws = rt.workers().unwrap();
        let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
        let mut last = Reference::NULL;
        for op in ops {
            let (minors, majors) = (w.stats().minor_gcs, w.stats().major_gcs);
            match op {
                Op::Alloc(n) => last = w.alloc(&mut gc, ObjectKind::Raw, &mut vec![1; n]).unwrap(),
                Op::Keep => { w.roots_mut().push(last); }
                Op::Drop => { w.roots_mut().pop(); }
                Op::Minor => { w.minor_gc().unwrap(); last = Reference::NULL; }
                Op::Major => { w.major_gc().unwrap(); last = Reference::NULL; }
            }
            let h = w.heap();
            prop_assert!(h.old_base() <= h.young_boundary());
            prop_assert!(h.young_boundary() <= h.old_top());
            prop_assert!(h.old_top() <= h.nursery_base());
            prop_assert!(h.nursery_base() <= h.nursery_top());
            prop_assert!(h.nursery_top() <= h.nursery_limit());
            prop_assert!(h.nursery_limit() <= h.end());
            // A major collection runs a minor first, then empties the old area.
            if w.stats().minor_gcs != minors && w.stats().major_gcs == majors {
                let m = w.last_minor().unwrap();
                let free = h.end() - h.old_top();
                prop_assert_eq!(m.free_bytes, free);
                prop_assert_eq!(h.nursery_capacity(), (free / 2) / 8 * 8);
                prop_assert_eq!(h.nursery_base() - h.old_top(), (free / 2).div_ceil(8) * 8);
                prop_assert_eq!(h.nursery_limit(), h.end());
                prop_assert_eq!(h.nursery_top(), h.nursery_base());
            }
        }
        let v = rt.verifier().violations();
        prop_assert!(v.is_empty(), "{:?}", v);
    }
}

#[test]
fn first_block_starts_at_nursery_base() {
    let rt = runtime(config(1));
    let mut ws = rt.workers().unwrap();
    let r = {
        let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
        w.alloc(&mut gc, ObjectKind::Raw, &mut [0; 7]).unwrap()
    };
    assert_eq!(r.header_addr(), ws[0].heap().nursery_base());
    assert_eq!(ws[0].heap().nursery_top(), ws[0].heap().nursery_base() + 64);
}

#[test]
fn pure_nursery_overflow_forces_minor() {
    let rt = runtime(config(1));
    let mut ws = rt.workers().unwrap();
    let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
    let cap = w.heap().nursery_capacity();
    for _ in 0..cap / 16 + 1 {
        w.alloc(&mut gc, ObjectKind::Raw, &mut [0]).unwrap();
    }
    assert_eq!(w.stats().minor_gcs, 1);
}
