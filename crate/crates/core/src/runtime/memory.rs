use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::{infer_types, topo_sort, Graph, Op, TensorId};

/// One buffer request: `size` bytes live over the inclusive step range
/// `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lifetime {
    pub size: usize,
    pub start: usize,
    pub end: usize,
}

impl Lifetime {
    pub fn overlaps(&self, o: &Lifetime) -> bool {
        self.start <= o.end && o.start <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub size: usize,
    pub life: Lifetime,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryPlan {
    pub slots: BTreeMap<TensorId, Slot>,
    pub arena_size: usize,
}

impl MemoryPlan {
    /// Largest total size of simultaneously live buffers.
    pub fn peak_live(&self) -> usize {
        let last = self.slots.values().map(|s| s.life.end).max().unwrap_or(0);
        (0..=last)
            .map(|t| self.slots.values().filter(|s| s.life.start <= t && t <= s.life.end).map(|s| s.size).sum())
            .max()
            .unwrap_or(0)
    }

    /// First pair of buffers that are live together and share bytes.
    pub fn find_overlap(&self) -> Option<(TensorId, TensorId)> {
        let v: Vec<_> = self.slots.iter().collect();
        for (i, (ta, a)) in v.iter().enumerate() {
            for (tb, b) in &v[i + 1..] {
                let bytes = a.offset < b.offset + b.size && b.offset < a.offset + a.size;
                if a.size > 0 && b.size > 0 && bytes && a.life.overlaps(&b.life) {
                    return Some((**ta, **tb));
                }
            }
        }
        None
    }
}

/// Largest requests first; each goes into the smallest gap between
/// already placed, lifetime-overlapping buffers that fits it, or above all
/// of them.
pub fn plan_lifetimes(requests: &[Lifetime]) -> (Vec<usize>, usize) {
    let mut order: Vec<usize> = (0..requests.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(requests[i].size), requests[i].start, i));
    let mut offsets = vec![0usize; requests.len()];
    let mut placed: Vec<usize> = Vec::with_capacity(requests.len());
    let mut arena = 0;
    for i in order {
        let r = requests[i];
        let mut busy: Vec<(usize, usize)> = placed
            .iter()
            .filter(|&&j| requests[j].overlaps(&r) && requests[j].size > 0)
            .map(|&j| (offsets[j], offsets[j] + requests[j].size))
            .collect();
        busy.sort_unstable();
        let mut best: Option<(usize, usize)> = None;
        let mut cursor = 0;
        for &(lo, hi) in &busy {
            if lo >= cursor + r.size {
                let gap = lo - cursor;
                if best.map_or(true, |(g, _)| gap < g) {
                    best = Some((gap, cursor));
                }
            }
            cursor = cursor.max(hi);
        }
        offsets[i] = best.map_or(cursor, |(_, at)| at);
        arena = arena.max(offsets[i] + r.size);
        placed.push(i);
    }
    (offsets, arena)
}

/// Lifetimes run from the producing step to the last consuming step in
/// topological order; graph outputs stay live to the end. Constants are not
/// planned since they live in the model image.
pub fn plan_memory(g: &Graph) -> Result<MemoryPlan> {
    let types = infer_types(g)?;
    let order = topo_sort(g)?;
    let last = order.len().saturating_sub(1);
    let mut life: BTreeMap<TensorId, Lifetime> = BTreeMap::new();
    for (step, &i) in order.iter().enumerate() {
        let n = &g.nodes[i];
        for t in &n.inputs {
            if let Some(l) = life.get_mut(t) {
                l.end = step;
            }
        }
        if !matches!(n.op, Op::Constant) {
            life.insert(n.output, Lifetime { size: types[&n.output].byte_len(), start: step, end: step });
        }
    }
    for t in &g.outputs {
        if let Some(l) = life.get_mut(t) {
            l.end = last;
        }
    }
    let ids: Vec<TensorId> = life.keys().copied().collect();
    let reqs: Vec<Lifetime> = life.values().copied().collect();
    let (offsets, arena_size) = plan_lifetimes(&reqs);
    let slots = ids
        .into_iter()
        .zip(reqs.iter().zip(offsets))
        .map(|(t, (&l, offset))| (t, Slot { offset, size: l.size, life: l }))
        .collect();
    Ok(MemoryPlan { slots, arena_size })
}
