#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

use nodegc::workload::{standard_table, CONS_ID, TREE_ID};
use nodegc::{Collector, ObjectKind, Reference, Runtime, RuntimeConfig, Worker};
use proptest::prelude::*;

#[derive(Clone, Debug)]
pub enum MField {
    Raw(u64),
    Edge(usize),
    Null,
}

#[derive(Clone, Debug)]
pub struct MObj {
    pub kind: ObjectKind,
    pub fields: Vec<MField>,
}

/// An object graph kept outside the heap. Edges only point to earlier
/// objects, so it can be built by allocating in index order.
#[derive(Clone, Debug)]
pub struct Model {
    pub objects: Vec<MObj>,
    pub roots: Vec<Option<usize>>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put(out: &mut Vec<u8>, tag: u8, v: u64) {
    out.push(tag);
    out.extend_from_slice(&v.to_le_bytes());
}

impl Model {
    /// Breadth-first numbering and checksum, computed from the model alone.
    pub fn canonical(&self) -> (usize, u64) {
        let mut num: HashMap<usize, u64> = HashMap::new();
        let mut order = Vec::new();
        let mut queue = VecDeque::new();
        let visit = |i: usize, num: &mut HashMap<usize, u64>, q: &mut VecDeque<usize>| {
            let n = num.len() as u64;
            *num.entry(i).or_insert_with(|| {
                q.push_back(i);
                n
            })
        };
        let mut root_ids = Vec::new();
        for r in &self.roots {
            root_ids.push(r.map(|i| visit(i, &mut num, &mut queue)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&(self.roots.len() as u64).to_le_bytes());
        for r in root_ids {
            match r {
                None => put(&mut out, 0, 0),
                Some(n) => put(&mut out, 1, n),
            }
        }
        let mut body = Vec::new();
        while let Some(i) = queue.pop_front() {
            order.push(i);
            let o = &self.objects[i];
            body.extend_from_slice(&o.kind.id().to_le_bytes());
            body.extend_from_slice(&(o.fields.len() as u64).to_le_bytes());
            for f in &o.fields {
                match *f {
                    MField::Raw(w) => put(&mut body, 0, w),
                    MField::Edge(j) => {
                        let n = visit(j, &mut num, &mut queue);
                        put(&mut body, 1, n)
                    }
                    MField::Null => put(&mut body, 2, 0),
                }
            }
        }
        out.extend_from_slice(&(order.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        (order.len(), fnv1a(&out))
    }

    /// Allocates the graph on `w`, leaving exactly the model roots in its root set.
    pub fn build<'rt>(&self, w: &mut Worker<'rt>, gc: &mut dyn Collector<'rt>) -> Vec<Reference> {
        let base = w.roots().len();
        for o in &self.objects {
            let mut fields: Vec<u64> = o
                .fields
                .iter()
                .map(|f| match *f {
                    MField::Raw(v) => v,
                    MField::Edge(j) => w.roots().get(base + j).raw(),
                    MField::Null => 0,
                })
                .collect();
            let r = w.alloc(gc, o.kind, &mut fields).expect("alloc");
            w.roots_mut().push(r);
        }
        let all: Vec<Reference> = (0..self.objects.len()).map(|i| w.roots().get(base + i)).collect();
        w.roots_mut().truncate(base);
        for r in &self.roots {
            w.roots_mut().push(r.map_or(Reference::NULL, |i| all[i]));
        }
        all
    }
}

fn field(ptr: bool, i: usize) -> BoxedStrategy<MField> {
    if ptr && i > 0 {
        prop_oneof![
            1 => Just(MField::Null),
            4 => (0..i).prop_map(MField::Edge),
        ]
        .boxed()
    } else if ptr {
        Just(MField::Null).boxed()
    } else {
        any::<u64>().prop_map(MField::Raw).boxed()
    }
}

fn object(i: usize) -> BoxedStrategy<MObj> {
    let layout = prop_oneof![
        (1usize..5).prop_map(|n| (ObjectKind::Raw, vec![false; n])),
        (1usize..5).prop_map(|n| (ObjectKind::Vector, vec![true; n])),
        Just((ObjectKind::Mixed(CONS_ID), vec![false, true, true])),
        Just((ObjectKind::Mixed(TREE_ID), vec![true, false, false, true])),
    ];
    layout
        .prop_flat_map(move |(kind, ptrs)| {
            let fs: Vec<_> = ptrs.into_iter().map(|p| field(p, i)).collect();
            fs.prop_map(move |fields| MObj { kind, fields })
        })
        .boxed()
}

pub fn model(max_objects: usize) -> impl Strategy<Value = Model> {
    (1..=max_objects).prop_flat_map(|n| {
        let objs: Vec<_> = (0..n).map(object).collect();
        let roots = prop::collection::vec(prop::option::weighted(0.9, 0..n), 1..6);
        (objs, roots).prop_map(|(objects, roots)| Model { objects, roots })
    })
}

pub fn config(workers: usize) -> RuntimeConfig {
    RuntimeConfig {
        workers,
        local_heap_bytes: 64 * 1024,
        chunk_bytes: 8 * 1024,
        global_trigger_bytes_per_worker: 1 << 20,
        global_arena_bytes: 64 << 20,
        verify: true,
        ..RuntimeConfig::default()
    }
}

pub fn runtime(cfg: RuntimeConfig) -> Runtime {
    Runtime::new(cfg, standard_table()).expect("runtime")
}

/// Checksum of everything reachable from all workers' roots.
pub fn checksum(rt: &Runtime, workers: &[Worker<'_>]) -> u64 {
    let views: Vec<&Worker> = workers.iter().collect();
    nodegc::oracle::snapshot_all(rt, &views).expect("snapshot").checksum()
}
