mod common;

use std::collections::BTreeSet;

use common::*;
use nodegc::oracle::{self, ViolationKind};
use nodegc::{decode_header, HeaderWord, ObjectKind, Reference, SequentialCollector, Worker};
use proptest::prelude::*;

const W: u64 = 8;

fn clean(rt: &nodegc::Runtime) {
    let v = rt.verifier().violations();
    assert!(v.is_empty(), "{v:#?}");
}

fn sweep(rt: &nodegc::Runtime, ws: &[Worker<'_>]) {
    let views: Vec<&Worker> = ws.iter().collect();
    let v = oracle::sweep_all(rt, &views);
    assert!(v.is_empty(), "{v:#?}");
}

/// Pointer slots of the old area found by walking headers directly.
fn old_slots_into_nursery(rt: &nodegc::Runtime, w: &Worker<'_>) -> BTreeSet<usize> {
    let h = w.heap();
    let mem = rt.memory();
    let mut out = BTreeSet::new();
    let mut a = h.old_base();
    while a < h.old_top() {
        let hdr = match decode_header(mem.load(a), rt.table()).unwrap() {
            HeaderWord::Object(h) => h,
            HeaderWord::Forwarded(_) => panic!("forwarded object in old area"),
        };
        let n = hdr.length() as usize;
        for i in 0..n {
            let ptr = match hdr.kind() {
                ObjectKind::Raw => false,
                ObjectKind::Vector => true,
                ObjectKind::Mixed(id) => rt.table().get(id).unwrap().is_pointer_field(i as u32),
            };
            let slot = a + (i + 1) * W as usize;
            if ptr && h.in_nursery(mem.load(slot) as usize) {
                out.insert(slot);
            }
        }
        a += (n + 1) * W as usize;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn snapshot_matches_model(m in model(40)) {
        let rt = runtime(config(1));
        let mut ws = rt.workers().unwrap();
        let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
        m.build(w, &mut gc);
        let (n, sum) = m.canonical();
        let views = [&*w];
        let snap = oracle::snapshot_all(&rt, &views).unwrap();
        prop_assert_eq!(snap.objects().len(), n);
        prop_assert_eq!(snap.checksum(), sum);
    }

    #[test]
    fn every_collection_preserves_the_graph(m in model(60), promote_mask in any::<u8>()) {
        let rt = runtime(config(1));
        let mut ws = rt.workers().unwrap();
        let (_, want) = m.canonical();
        {
            let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
            m.build(w, &mut gc);
        }
        prop_assert_eq!(checksum(&rt, &ws), want);
        ws[0].minor_gc().unwrap();
        prop_assert_eq!(checksum(&rt, &ws), want);
        ws[0].major_gc().unwrap();
        prop_assert_eq!(checksum(&rt, &ws), want);
        {
            let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
            for i in 0..w.roots().len() {
                if promote_mask & (1 << (i % 8)) != 0 {
                    let r = w.roots().get(i);
                    let p = w.promote(&mut gc, r).unwrap();
                    w.roots_mut().set(i, p.global_ref);
                }
            }
        }
        prop_assert_eq!(checksum(&rt, &ws), want);
        sweep(&rt, &ws);
        {
            let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
            prop_assert!(w.request_global_gc());
            prop_assert!(w.safepoint(&mut gc).unwrap());
        }
        prop_assert_eq!(checksum(&rt, &ws), want);
        prop_assert_eq!(rt.controller().collection_count(), 1);
        sweep(&rt, &ws);
        clean(&rt);
    }

    #[test]
    fn promoted_closure_is_global(m in model(40)) {
        let rt = runtime(config(1));
        let mut ws = rt.workers().unwrap();
        let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
        m.build(w, &mut gc);
        let r = w.roots().get(0);
        let p = w.promote(&mut gc, r).unwrap();
        w.roots_mut().set(0, p.global_ref);
        let views = [&*w];
        let snap = oracle::snapshot_all(&rt, &views).unwrap();
        let only = oracle::snapshot(&rt, &[p.global_ref], &[w.heap()]).unwrap();
        for a in only.addresses() {
            prop_assert!(rt.is_global(*a), "{a:#x} still local");
        }
        prop_assert!(snap.objects().len() >= only.objects().len());
        clean(&rt);
    }

    #[test]
    fn old_area_scan_matches_brute_force(m in model(40), picks in prop::collection::vec((any::<prop::sample::Index>(), any::<prop::sample::Index>(), 0usize..4), 0..30)) {
        let rt = runtime(config(1));
        let mut ws = rt.workers().unwrap();
        let all = {
            let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
            let base = w.roots().len();
            let all = m.build(w, &mut gc);
            for r in &all {
                w.roots_mut().push(*r);
            }
            (base, all.len())
        };
        ws[0].minor_gc().unwrap();
        let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
        let olds: Vec<Reference> = (0..all.1).map(|i| w.roots().get(all.0 + m.roots.len() + i)).collect();
        let mut fresh = Vec::new();
        for _ in 0..4 {
            let r = w.alloc(&mut gc, ObjectKind::Raw, &mut [7]).unwrap();
            prop_assert!(w.heap().in_nursery(r.addr()));
            fresh.push(r);
        }
        for (target, value, f) in picks {
            let i = target.index(olds.len());
            let o = &m.objects[i];
            let ptrs: Vec<usize> = match o.kind {
                ObjectKind::Raw => continue,
                ObjectKind::Vector => (0..o.fields.len()).collect(),
                ObjectKind::Mixed(id) => {
                    let d = rt.table().get(id).unwrap();
                    d.pointer_fields.iter().map(|&p| p as usize).collect()
                }
            };
            let field = ptrs[f % ptrs.len()];
            w.write_field(olds[i], field, fresh[value.index(fresh.len())].raw()).unwrap();
        }
        let got: BTreeSet<usize> = w.heap().scan_old_area_for_nursery_refs(rt.memory(), rt.table()).unwrap().collect();
        prop_assert_eq!(got, old_slots_into_nursery(&rt, w));
    }
}

#[test]
fn empty_snapshot_is_constant() {
    let rt = runtime(config(2));
    let ws = rt.workers().unwrap();
    let views: Vec<&Worker> = ws.iter().collect();
    let s = oracle::snapshot_all(&rt, &views).unwrap();
    assert!(s.objects().is_empty());
    assert_eq!(s.checksum(), oracle::empty_checksum());
    assert!(oracle::sweep_all(&rt, &views).is_empty());
}

#[test]
fn three_cell_list() {
    let rt = runtime(config(1));
    let mut ws = rt.workers().unwrap();
    let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
    let slot = w.roots_mut().push(Reference::NULL);
    for v in [3u64, 2, 1] {
        let car = w.alloc(&mut gc, ObjectKind::Raw, &mut [v * 10]).unwrap();
        let mut f = [v, car.raw(), w.roots().get(slot).raw()];
        let head = w.alloc(&mut gc, ObjectKind::Mixed(nodegc::workload::CONS_ID), &mut f).unwrap();
        w.roots_mut().set(slot, head);
    }
    let head = w.roots().get(slot);
    let only = oracle::snapshot(&rt, &[head], &[w.heap()]).unwrap();
    let cells: Vec<_> = only.objects().iter().filter(|o| o.id == nodegc::workload::CONS_ID).collect();
    assert_eq!(cells.len(), 3);
    assert_eq!(cells[0].fields[0], oracle::Field::Raw(1));
}

#[test]
fn planted_global_to_local_pointer_is_reported() {
    let rt = runtime(config(1));
    let mut ws = rt.workers().unwrap();
    let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
    let a = w.alloc(&mut gc, ObjectKind::Vector, &mut [0]).unwrap();
    let g = w.promote(&mut gc, a).unwrap().global_ref;
    w.roots_mut().push(g);
    let n = w.alloc(&mut gc, ObjectKind::Raw, &mut [1]).unwrap();
    w.roots_mut().push(n);
    assert!(w.heap().in_nursery(n.addr()));
    rt.memory().store(g.addr(), n.raw());
    let views = [&*w];
    let v = oracle::sweep_all(&rt, &views);
    assert_eq!(v.len(), 1, "{v:#?}");
    assert_eq!(v[0].kind, ViolationKind::GlobalToLocal);
    assert_eq!(v[0].at, g.addr());
}

#[test]
fn planted_foreign_local_pointer_is_reported() {
    let rt = runtime(config(2));
    let mut ws = rt.workers().unwrap();
    let other = {
        let (w, mut gc) = SequentialCollector::around(&mut ws, 1);
        let r = w.alloc(&mut gc, ObjectKind::Raw, &mut [5]).unwrap();
        w.roots_mut().push(r);
        r
    };
    let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
    let v = w.alloc(&mut gc, ObjectKind::Vector, &mut [0]).unwrap();
    w.roots_mut().push(v);
    rt.memory().store(v.addr(), other.raw());
    let views: Vec<&Worker> = ws.iter().collect();
    let found = oracle::sweep_all(&rt, &views);
    assert_eq!(found.len(), 1, "{found:#?}");
    assert_eq!(found[0].kind, ViolationKind::ForeignLocal);
}
