mod common;

use common::runtime;
use nodegc::workload::{run_workload, ExecMode, Mix, SizeRange, WorkloadSpec};
use proptest::prelude::*;

fn zero() -> Mix {
    Mix { alloc_list: 0.0, alloc_tree: 0.0, drop_root: 0.0, steal: 0.0, send_message: 0.0, write_field: 0.0 }
}

#[test]
fn zero_ops_give_an_empty_report() {
    let spec = WorkloadSpec { workers: 2, ops_per_worker: 0, ..WorkloadSpec::default() };
    let rt = runtime(spec.stress_config());
    let r = run_workload(&spec, &rt, ExecMode::Deterministic).unwrap();
    assert_eq!(r.minor_gcs + r.major_gcs + r.global_gcs + r.promotions, 0);
    assert_eq!(r.final_objects, 0);
    assert_eq!(r.final_checksum, format!("{:016x}", nodegc::oracle::empty_checksum()));
}

#[test]
fn list_allocation_past_the_nursery_runs_a_minor() {
    let mut spec = WorkloadSpec {
        workers: 1,
        ops_per_worker: 0,
        mix: Mix { alloc_list: 1.0, ..zero() },
        ..WorkloadSpec::default()
    };
    spec.sizes.list_len = SizeRange::new(32, 32);
    spec.sizes.raw_words = SizeRange::new(3, 3);
    let cfg = spec.stress_config();
    // 32 cells of a 4-word cons and a 4-word raw object per op.
    let per_op = 32 * 8 * 8;
    spec.ops_per_worker = cfg.local_heap_bytes / per_op + 1;
    let rt = runtime(cfg);
    let r = run_workload(&spec, &rt, ExecMode::Deterministic).unwrap();
    assert!(r.minor_gcs >= 1);
    assert!(r.is_clean());
}

#[test]
fn steal_heavy_pair_promotes_and_stays_clean() {
    for mode in [ExecMode::Deterministic, ExecMode::Threaded] {
        let spec = WorkloadSpec {
            workers: 2,
            ops_per_worker: 300,
            mix: Mix { alloc_list: 1.0, alloc_tree: 1.0, steal: 4.0, ..zero() },
            ..WorkloadSpec::default()
        };
        let rt = runtime(spec.stress_config());
        let r = run_workload(&spec, &rt, mode).unwrap();
        assert!(r.promotions > 0, "{mode:?}");
        assert!(r.op_counts.steals_served > 0, "{mode:?}");
        assert!(r.checks.sweeps > 0);
        assert!(r.is_clean(), "{:?} {:?}", r.violations, r.errors);
    }
}

#[test]
fn messages_arrive_as_global_roots() {
    let spec = WorkloadSpec {
        workers: 3,
        ops_per_worker: 200,
        mix: Mix { alloc_tree: 2.0, send_message: 2.0, ..zero() },
        ..WorkloadSpec::default()
    };
    let rt = runtime(spec.stress_config());
    let r = run_workload(&spec, &rt, ExecMode::Deterministic).unwrap();
    assert!(r.op_counts.messages_received > 0);
    assert!(r.promotions > 0);
    assert!(r.is_clean(), "{:?} {:?}", r.violations, r.errors);
}

#[test]
fn imbalanced_allocation_is_shared_out_per_node() {
    let spec = WorkloadSpec {
        workers: 2,
        op_counts: Some(vec![900, 100]),
        mix: Mix { alloc_list: 4.0, alloc_tree: 2.0, drop_root: 0.5, ..zero() },
        max_roots: 64,
        ..WorkloadSpec::default()
    };
    for mode in [ExecMode::Deterministic, ExecMode::Threaded] {
        let rt = runtime(spec.stress_config());
        let r = run_workload(&spec, &rt, mode).unwrap();
        assert!(r.is_clean(), "{:?} {:?}", r.violations, r.errors);
        assert!(r.global_gcs > 0);
        if mode == ExecMode::Deterministic {
            assert!(r.steal_count > 0, "{mode:?}");
        }
    }
}

#[test]
fn spec_round_trips_through_json() {
    let spec = WorkloadSpec::random(11);
    let text = serde_json::to_string(&spec).unwrap();
    let back: WorkloadSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, spec);
    assert!(serde_json::from_str::<WorkloadSpec>(r#"{"bogus": 1}"#).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn identical_seed_gives_identical_report(seed in any::<u64>()) {
        let mut spec = WorkloadSpec::random(seed);
        spec.ops_per_worker = 150;
        let run = || {
            let rt = runtime(spec.stress_config());
            run_workload(&spec, &rt, ExecMode::Deterministic).unwrap().without_timing()
        };
        let a = run();
        prop_assert!(a.is_clean());
        let b = run();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
