//! Node topology, thread pinning and placement of backing memory.
//!
//! With `NumaMode::RealOs` memory is bound with `mbind(2)` and threads are
//! pinned with `sched_setaffinity(2)`. Any host failure degrades the
//! topology to simulated bookkeeping; collector behaviour is identical in
//! both modes.

use std::cell::Cell;
use std::fs;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{GcError, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumaMode {
    #[serde(rename = "real")]
    RealOs,
    #[serde(rename = "sim")]
    Simulated,
}

impl FromStr for NumaMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "real" => Ok(NumaMode::RealOs),
            "sim" => Ok(NumaMode::Simulated),
            _ => Err(format!("unknown numa mode {s:?} (expected real|sim)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementPolicy {
    /// Memory on the requesting worker's node.
    #[serde(rename = "local")]
    LocalNode,
    /// Round-robin across nodes, one chunk at a time.
    Interleaved,
    /// Everything on node 0.
    #[serde(rename = "single")]
    SingleNode,
}

impl FromStr for PlacementPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "local" => Ok(PlacementPolicy::LocalNode),
            "interleaved" => Ok(PlacementPolicy::Interleaved),
            "single" => Ok(PlacementPolicy::SingleNode),
            _ => Err(format!(
                "unknown placement {s:?} (expected local|interleaved|single)"
            )),
        }
    }
}

thread_local! {
    static PINNED_NODE: Cell<Option<NodeId>> = const { Cell::new(None) };
}

/// Node the calling thread was last pinned to through a [`Topology`].
pub fn current_pinned_node() -> Option<NodeId> {
    PINNED_NODE.with(Cell::get)
}

#[derive(Debug)]
pub struct Topology {
    nodes: usize,
    cores_per_node: usize,
    requested: NumaMode,
    degraded: AtomicBool,
    node_cpus: Vec<Vec<usize>>,
    interleave: AtomicUsize,
}

impl Topology {
    /// Simulated topology; never touches the host.
    pub fn simulated(nodes: usize, cores_per_node: usize) -> Result<Self> {
        Self::new(nodes, cores_per_node, NumaMode::Simulated)
    }

    pub fn new(nodes: usize, cores_per_node: usize, mode: NumaMode) -> Result<Self> {
        if nodes == 0 {
            return Err(GcError::Topology("at least one node is required".into()));
        }
        if cores_per_node == 0 {
            return Err(GcError::Topology("cores_per_node must be positive".into()));
        }
        let mut topo = Topology {
            nodes,
            cores_per_node,
            requested: mode,
            degraded: AtomicBool::new(false),
            node_cpus: Vec::new(),
            interleave: AtomicUsize::new(0),
        };
        if mode == NumaMode::RealOs {
            match host_node_cpus() {
                Some(cpus) if cpus.len() >= nodes => topo.node_cpus = cpus,
                Some(cpus) => {
                    warn!(
                        "host exposes {} NUMA node(s), {nodes} requested; using simulated topology",
                        cpus.len()
                    );
                    topo.degraded.store(true, Ordering::Relaxed);
                }
                None => {
                    warn!("host NUMA topology unavailable; using simulated topology");
                    topo.degraded.store(true, Ordering::Relaxed);
                }
            }
        }
        Ok(topo)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn cores_per_node(&self) -> usize {
        self.cores_per_node
    }

    pub fn requested_mode(&self) -> NumaMode {
        self.requested
    }

    /// Effective mode after any degradation.
    pub fn mode(&self) -> NumaMode {
        if self.requested == NumaMode::RealOs && !self.degraded.load(Ordering::Relaxed) {
            NumaMode::RealOs
        } else {
            NumaMode::Simulated
        }
    }

    fn degrade(&self, what: &str) {
        if !self.degraded.swap(true, Ordering::Relaxed) {
            warn!("{what}; continuing with simulated NUMA placement");
        }
    }

    /// Sparse assignment: worker `i` runs on node `i mod nodes`.
    pub fn assign_worker_node(&self, worker: usize, total_workers: usize) -> NodeId {
        debug_assert!(worker < total_workers);
        worker % self.nodes
    }

    /// Picks the node for a new piece of backing memory.
    pub fn place(&self, policy: PlacementPolicy, requesting: NodeId) -> NodeId {
        match policy {
            PlacementPolicy::LocalNode => requesting,
            PlacementPolicy::Interleaved => {
                self.interleave.fetch_add(1, Ordering::Relaxed) % self.nodes
            }
            PlacementPolicy::SingleNode => 0,
        }
    }

    /// Places `size` bytes at `addr` and, in real mode, binds the pages.
    pub fn place_memory(
        &self,
        policy: PlacementPolicy,
        requesting: NodeId,
        addr: usize,
        size: usize,
    ) -> NodeId {
        debug_assert!(size > 0);
        let node = self.place(policy, requesting);
        self.bind_memory(addr, size, node);
        node
    }

    /// Binds an already reserved range to `node` when running for real.
    pub fn bind_memory(&self, addr: usize, size: usize, node: NodeId) {
        if self.mode() != NumaMode::RealOs {
            return;
        }
        if let Err(e) = mbind(addr, size, node) {
            self.degrade(&format!("mbind to node {node} failed: {e}"));
        }
    }

    /// Restricts the calling thread to `node`'s cores.
    pub fn pin_current_thread(&self, node: NodeId) -> Result<()> {
        if node >= self.nodes {
            return Err(GcError::Topology(format!(
                "node {node} out of range (topology has {} nodes)",
                self.nodes
            )));
        }
        if self.mode() == NumaMode::RealOs {
            if let Err(e) = set_affinity(&self.node_cpus[node]) {
                self.degrade(&format!("pinning to node {node} failed: {e}"));
            }
        }
        PINNED_NODE.with(|p| p.set(Some(node)));
        Ok(())
    }

    /// CPUs of `node`; empty in simulated mode.
    pub fn node_cpus(&self, node: NodeId) -> &[usize] {
        self.node_cpus.get(node).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// CPU lists for every online node, or `None` without sysfs.
pub fn host_node_cpus() -> Option<Vec<Vec<usize>>> {
    let online = fs::read_to_string("/sys/devices/system/node/online").ok()?;
    let nodes = parse_cpu_list(online.trim())?;
    let mut out = Vec::new();
    for (expected, node) in nodes.into_iter().enumerate() {
        // Holes in node numbering are not supported.
        if node != expected {
            return None;
        }
        let list = fs::read_to_string(format!("/sys/devices/system/node/node{node}/cpulist")).ok()?;
        out.push(parse_cpu_list(list.trim())?);
    }
    Some(out)
}

/// Parses the kernel's `0-3,8,10-11` list syntax.
pub fn parse_cpu_list(s: &str) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    if s.is_empty() {
        return Some(out);
    }
    for part in s.split(',') {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().ok()?, b.parse().ok()?);
                if b < a {
                    return None;
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().ok()?),
        }
    }
    Some(out)
}

fn mbind(addr: usize, size: usize, node: NodeId) -> std::io::Result<()> {
    const MPOL_BIND: libc::c_long = 2;
    let bits = libc::c_ulong::BITS as usize;
    let mut mask = vec![0 as libc::c_ulong; node / bits + 1];
    mask[node / bits] |= 1 << (node % bits);
    let maxnode = (mask.len() * bits) as libc::c_ulong;
    // SAFETY: the range is owned by one of our arenas; the mask outlives the call.
    let rc = unsafe {
        libc::syscall(
            libc::SYS_mbind,
            addr as *mut libc::c_void,
            size as libc::c_ulong,
            MPOL_BIND,
            mask.as_ptr(),
            maxnode,
            0 as libc::c_uint,
        )
    };
    if rc == 0 {
        Ok(())
    } else {
        Err(std::io::Error::last_os_error())
    }
}

fn set_affinity(cpus: &[usize]) -> std::io::Result<()> {
    if cpus.is_empty() {
        return Err(std::io::Error::other("node has no CPUs"));
    }
    // SAFETY: cpu_set_t is plain data; CPU_SET only writes in bounds.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        for &c in cpus {
            libc::CPU_SET(c, &mut set);
        }
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0 {
            Ok(())
        } else {
            Err(std::io::Error::last_os_error())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_assignment() {
        let t = Topology::simulated(8, 6).unwrap();
        let got: Vec<_> = (0..4).map(|w| t.assign_worker_node(w, 4)).collect();
        assert_eq!(got, vec![0, 1, 2, 3]);
        let t = Topology::simulated(2, 6).unwrap();
        let got: Vec<_> = (0..4).map(|w| t.assign_worker_node(w, 4)).collect();
        assert_eq!(got, vec![0, 1, 0, 1]);
        let t = Topology::simulated(1, 6).unwrap();
        assert!((0..5).all(|w| t.assign_worker_node(w, 5) == 0));
    }

    #[test]
    fn placement_policies() {
        let t = Topology::simulated(4, 1).unwrap();
        assert_eq!(t.place(PlacementPolicy::LocalNode, 3), 3);
        let got: Vec<_> = (0..4).map(|_| t.place(PlacementPolicy::Interleaved, 2)).collect();
        assert_eq!(got, vec![0, 1, 2, 3]);
        assert_eq!(t.place(PlacementPolicy::SingleNode, 3), 0);
    }

    #[test]
    fn interleaving_is_fair() {
        let t = Topology::simulated(5, 1).unwrap();
        let mut counts = [0usize; 5];
        for i in 0..5 * 37 {
            counts[t.place(PlacementPolicy::Interleaved, i % 5)] += 1;
        }
        assert_eq!(counts, [37; 5]);
    }

    #[test]
    fn local_placement_is_identity() {
        let t = Topology::simulated(7, 1).unwrap();
        assert!((0..7).all(|n| t.place(PlacementPolicy::LocalNode, n) == n));
    }

    #[test]
    fn simulated_pinning_is_bookkeeping() {
        let t = Topology::simulated(2, 1).unwrap();
        std::thread::spawn(move || {
            t.pin_current_thread(1).unwrap();
            assert_eq!(current_pinned_node(), Some(1));
            assert!(t.pin_current_thread(2).is_err());
        })
        .join()
        .unwrap();
    }

    #[test]
    fn real_mode_on_host() {
        // One node always exists on Linux; degenerate real topology must work.
        let t = Topology::new(1, 1, NumaMode::RealOs).unwrap();
        std::thread::spawn(move || t.pin_current_thread(0).unwrap())
            .join()
            .unwrap();
    }

    #[test]
    fn real_mode_degrades_when_host_is_smaller() {
        let t = Topology::new(64, 1, NumaMode::RealOs).unwrap();
        assert_eq!(t.mode(), NumaMode::Simulated);
        assert_eq!(t.requested_mode(), NumaMode::RealOs);
    }

    #[test]
    fn cpu_lists() {
        assert_eq!(parse_cpu_list("0-3,8,10-11"), Some(vec![0, 1, 2, 3, 8, 10, 11]));
        assert_eq!(parse_cpu_list("0"), Some(vec![0]));
        assert_eq!(parse_cpu_list("3-1"), None);
    }
}
