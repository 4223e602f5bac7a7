use nodegc_memprobe::*;

fn small(kernel: Kernel) -> ProbeConfig {
    ProbeConfig {
        kernel,
        elements: 1 << 16,
        cache_bytes: 64 * 1024,
        repetitions: 3,
        ..ProbeConfig::default()
    }
}

#[test]
fn every_kernel_verifies_at_several_strides() {
    for kernel in Kernel::ALL {
        for stride in [1, 2, 7, 8, 64] {
            for threads in [1, 3] {
                let cfg = ProbeConfig { stride, threads, nodes: 2, ..small(kernel) };
                let r = run_kernel(&cfg).unwrap_or_else(|e| panic!("{kernel:?} stride {stride}: {e}"));
                assert_eq!(r.per_thread.len(), threads);
                let total: usize = r.per_thread.iter().map(|t| t.elements).sum();
                assert_eq!(total, cfg.elements);
                for t in &r.per_thread {
                    assert_eq!(t.touched, t.elements.div_ceil(stride));
                    assert_eq!(t.useful_bytes, (kernel.streams() * t.touched * 8) as u64);
                    assert!(t.best_ns <= t.mean_ns);
                    assert!(t.mb_per_s > 0.0 && t.latency_ns > 0.0);
                }
            }
        }
    }
}

#[test]
fn aggregate_is_sum_of_threads() {
    let cfg = ProbeConfig { threads: 4, nodes: 4, ..small(Kernel::Triad) };
    let r = run_kernel(&cfg).unwrap();
    let sum: f64 = r.per_thread.iter().map(|t| t.mb_per_s).sum();
    assert!((r.mb_per_s - sum).abs() <= 1e-9 * sum);
    assert_eq!(r.nodes_active, 4);
    assert!((r.mb_per_s_per_node - r.mb_per_s / 4.0).abs() <= 1e-9 * sum);
    let nodes: Vec<_> = r.per_thread.iter().map(|t| t.node).collect();
    assert_eq!(nodes, [0, 1, 2, 3]);
    assert!(r.simulated && !r.numa_meaningful);
}

#[test]
fn cross_node_uses_the_next_node() {
    let cfg = ProbeConfig { threads: 2, nodes: 2, placement: Placement::CrossNode, ..small(Kernel::Copy) };
    let r = run_kernel(&cfg).unwrap();
    for t in &r.per_thread {
        assert_eq!(t.memory_node, (t.node + 1) % 2);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(run_kernel(&ProbeConfig { stride: 0, ..small(Kernel::Copy) }).is_err());
    assert!(run_kernel(&ProbeConfig { cache_bytes: 1 << 20, ..small(Kernel::Copy) }).is_err());
    assert!(run_kernel(&ProbeConfig { threads: 0, ..small(Kernel::Copy) }).is_err());
}

#[test]
fn wrong_results_are_caught() {
    let b = [1.0, 2.0, 3.0, 4.0];
    let c = [5.0, 6.0, 7.0, 8.0];
    let mut a = [SENTINEL; 4];
    run_pass(Kernel::Sum, 0.0, 2, &mut a, &b, &c);
    assert_eq!(a, [6.0, SENTINEL, 10.0, SENTINEL]);
    assert_eq!(check_pass(Kernel::Sum, 0.0, 2, &a, &b, &c), None);
    a[1] = 0.0;
    assert_eq!(check_pass(Kernel::Sum, 0.0, 2, &a, &b, &c), Some((1, 0.0, SENTINEL)));
}

#[test]
fn sweep_matrix_and_csv() {
    let one = SweepSpec {
        base: small(Kernel::Scale),
        kernels: vec![Kernel::Scale],
        threads: vec![1],
        placements: vec![Placement::NumaAware],
        strides: vec![1],
    };
    assert_eq!(sweep(&one).len(), 1);
    let spec = SweepSpec {
        threads: vec![1, 2, 4],
        placements: vec![Placement::NumaAware, Placement::CrossNode],
        base: ProbeConfig { nodes: 2, ..small(Kernel::Scale) },
        ..one
    };
    let rows = sweep(&spec);
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.error.is_empty()));
    let mut out = Vec::new();
    write_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "kernel,threads,nodes_active,stride,placement,mb_per_s,mb_per_s_per_node,latency_ns,simulated,error"
    );
    assert_eq!(lines.count(), 6);
    let four = rows.iter().find(|r| r.threads == 4).unwrap();
    assert_eq!(four.nodes_active, 2);
}

#[test]
fn failed_rows_keep_their_coordinates() {
    let spec = SweepSpec {
        base: small(Kernel::Copy),
        kernels: vec![Kernel::Copy],
        threads: vec![1],
        placements: vec![Placement::NumaAware],
        strides: vec![0, 1],
    };
    let rows = sweep(&spec);
    assert_eq!(rows.len(), 2);
    assert!(!rows[0].error.is_empty() && rows[0].mb_per_s.is_none());
    assert!(rows[1].error.is_empty());
}
