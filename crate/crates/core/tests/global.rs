mod common;

use common::*;
use nodegc::workload::CONS_ID;
use nodegc::{
    BalanceMode, ObjectKind, PlacementPolicy, Reference, SequentialCollector, ThreadedCollector,
    Worker,
};

#[test]
fn trigger_flips_exactly_past_workers_times_threshold() {
    let mut cfg = config(4);
    cfg.chunk_bytes = 8 * 1024;
    cfg.global_trigger_bytes_per_worker = 64 * 1024;
    let rt = runtime(cfg);
    let mut ws = rt.workers().unwrap();
    let limit = 4 * 64 * 1024u64;
    let mut i = 0;
    loop {
        ws[i % 4].acquire_chunk().unwrap();
        i += 1;
        let used = rt.chunks().in_use_bytes();
        assert_eq!(rt.controller().pending(), used > limit, "after {i} chunks, {used} bytes");
        if used > limit {
            break;
        }
    }
    assert_eq!(i as u64, limit / (8 * 1024) + 1);
}

#[test]
fn repeated_threaded_collections_copy_each_object_once() {
    let mut cfg = config(4);
    cfg.local_heap_bytes = 256 * 1024;
    cfg.chunk_bytes = 16 * 1024;
    let rt = runtime(cfg);
    let mut ws = rt.workers().unwrap();
    let shared = {
        let (w, mut gc) = SequentialCollector::around(&mut ws, 0);
        let slot = w.roots_mut().push(Reference::NULL);
        for part in 0..20 {
            let local = w.roots_mut().push(Reference::NULL);
            for v in 0..200u64 {
                let mut f = [part * 1000 + v, 0, w.roots().get(local).raw()];
                let c = w.alloc(&mut gc, ObjectKind::Mixed(CONS_ID), &mut f).unwrap();
                w.roots_mut().set(local, c);
            }
            // The new run hangs off `next`; the list built so far off `car`.
            let mut f = [u64::MAX, 0, w.roots().get(local).raw()];
            let head = w.alloc(&mut gc, ObjectKind::Mixed(CONS_ID), &mut f).unwrap();
            w.write_field(head, 1, w.roots().get(slot).raw()).unwrap();
            let g = w.promote(&mut gc, head).unwrap().global_ref;
            w.roots_mut().truncate(local);
            w.roots_mut().set(slot, g);
        }
        w.roots().get(slot)
    };
    for w in ws.iter_mut().skip(1) {
        w.roots_mut().push(shared);
    }
    let want = checksum(&rt, &ws);
    const ROUNDS: usize = 10;
    std::thread::scope(|s| {
        for w in ws.iter_mut() {
            s.spawn(move || {
                let mut gc = ThreadedCollector;
                for round in 0..ROUNDS {
                    while rt_of(w).controller().collection_count() <= round {
                        if w.id() == 0 {
                            w.request_global_gc();
                        }
                        w.safepoint(&mut gc).unwrap();
                        std::thread::yield_now();
                    }
                }
            });
        }
    });
    assert_eq!(rt.controller().collection_count(), ROUNDS);
    assert_eq!(checksum(&rt, &ws), want);
    let c = rt.verifier().counts();
    assert_eq!(c.single_copy_checks, ROUNDS as u64);
    let v = rt.verifier().violations();
    assert!(v.is_empty(), "{v:#?}");
}

fn rt_of<'rt>(w: &Worker<'rt>) -> &'rt nodegc::Runtime {
    w.runtime()
}

#[test]
fn local_placement_keeps_chunks_on_worker_node() {
    let mut cfg = config(4);
    cfg.nodes = 4;
    cfg.cores_per_node = 1;
    cfg.chunk_bytes = 4096;
    let rt = runtime(cfg);
    let mut ws = rt.workers().unwrap();
    for _ in 0..50 {
        for w in ws.iter_mut() {
            let a = w.acquire_chunk().unwrap();
            assert_eq!(a.node, w.node());
            assert_eq!(rt.chunks().chunk(a.chunk).node(), w.node());
        }
    }
    for w in &ws {
        assert_eq!(w.stats().chunk_nodes[w.node()], 50);
    }
}

#[test]
fn interleaved_placement_spreads_evenly() {
    let mut cfg = config(4);
    cfg.nodes = 4;
    cfg.cores_per_node = 1;
    cfg.chunk_bytes = 4096;
    cfg.placement = PlacementPolicy::Interleaved;
    cfg.global_trigger_bytes_per_worker = 1 << 30;
    let rt = runtime(cfg);
    let mut ws = rt.workers().unwrap();
    for k in 0..4000 {
        ws[(k * 7) % 4].acquire_chunk().unwrap();
    }
    let mut per_node = [0u64; 4];
    for w in &ws {
        for (n, c) in w.stats().chunk_nodes.iter().enumerate() {
            per_node[n] += c;
        }
    }
    assert_eq!(per_node, [1000; 4]);
}

#[test]
fn balance_modes_agree_on_the_live_graph() {
    use nodegc::workload::{run_workload, ExecMode, WorkloadSpec};
    for seed in 0..12 {
        // Field writes depend on collection timing; see the workload docs.
        let mut spec = WorkloadSpec::random(seed);
        spec.mix.write_field = 0.0;
        let run = |mode: BalanceMode| {
            let mut cfg = spec.stress_config();
            cfg.balance = mode;
            let rt = runtime(cfg);
            let r = run_workload(&spec, &rt, ExecMode::Deterministic).unwrap();
            assert!(r.is_clean(), "{:?} {:?}", r.violations, r.errors);
            assert!(r.global_gcs > 0);
            r
        };
        let a = run(BalanceMode::PerNode);
        let b = run(BalanceMode::None);
        assert_eq!(a.final_checksum, b.final_checksum, "seed {seed}");
        assert_eq!(b.steal_count, 0);
    }
}
