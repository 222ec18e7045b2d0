use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use super::{malformed, Graph, Node, Op, TensorId};
use crate::error::{Error, GraphFault, Result};
use crate::quant::QuantParams;
use crate::tensor::{Conv2dGeom, DType};

/// Static type of a tensor.
///
/// Three kinds exist: real (`F32`, no params), raw integer (int dtype, no
/// params) and dequantized (int payload that reads as `s·(q - z)`).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorType {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub deq: Option<QuantParams>,
}

impl TensorType {
    pub fn real(shape: Vec<usize>) -> Self {
        TensorType { shape, dtype: DType::F32, deq: None }
    }

    /// Usable as a real number: either f32 or dequantized.
    pub fn is_numeric(&self) -> bool {
        self.dtype == DType::F32 || self.deq.is_some()
    }

    pub fn is_raw_int(&self) -> bool {
        self.dtype != DType::F32 && self.deq.is_none()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype.size()
    }
}

pub type TypeMap = BTreeMap<TensorId, TensorType>;

/// Kahn's algorithm; among ready nodes the lowest node id goes first.
/// Returns indices into `g.nodes`.
pub fn topo_sort(g: &Graph) -> Result<Vec<usize>> {
    let mut seen = HashSet::new();
    for n in &g.nodes {
        if !seen.insert(n.id) {
            return Err(Error::graph(Some(n.id), GraphFault::DuplicateNodeId));
        }
    }
    let mut producer: HashMap<TensorId, usize> = HashMap::new();
    for (i, n) in g.nodes.iter().enumerate() {
        if producer.insert(n.output, i).is_some() {
            return Err(Error::graph(Some(n.id), GraphFault::DuplicateProducer(n.output)));
        }
    }
    let mut indegree = vec![0usize; g.nodes.len()];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); g.nodes.len()];
    for (i, n) in g.nodes.iter().enumerate() {
        for &t in &n.inputs {
            let &p = producer.get(&t).ok_or_else(|| Error::graph(Some(n.id), GraphFault::DanglingTensor(t)))?;
            indegree[i] += 1;
            users[p].push(i);
        }
    }
    let mut ready: BinaryHeap<Reverse<(u32, usize)>> = g
        .nodes
        .iter()
        .enumerate()
        .filter(|(i, _)| indegree[*i] == 0)
        .map(|(i, n)| Reverse((n.id, i)))
        .collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(Reverse((_, i))) = ready.pop() {
        order.push(i);
        for &u in &users[i] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.push(Reverse((g.nodes[u].id, u)));
            }
        }
    }
    if order.len() != g.nodes.len() {
        let stuck = g.nodes.iter().enumerate().filter(|(i, _)| indegree[*i] > 0).map(|(_, n)| n.id).min();
        return Err(Error::graph(stuck, GraphFault::Cycle));
    }
    Ok(order)
}

pub fn validate(g: &Graph) -> Result<TypeMap> {
    infer_types(g)
}

/// Validates structure and returns the type of every produced tensor.
pub fn infer_types(g: &Graph) -> Result<TypeMap> {
    let order = topo_sort(g)?;
    check_interface(g)?;
    let mut types = TypeMap::new();
    for i in order {
        let n = &g.nodes[i];
        let args: Vec<&TensorType> = n.inputs.iter().map(|t| &types[t]).collect();
        let ty = infer_node(g, n, &args)?;
        types.insert(n.output, ty);
    }
    for n in &g.nodes {
        if let Op::LoraMatMul(a) = &n.op {
            for s in [a.a_slot, a.b_slot, a.alpha_slot] {
                if types.contains_key(&s) {
                    return Err(malformed(Some(n.id), format!("slot id t{s} collides with a produced tensor")));
                }
            }
        }
    }
    Ok(types)
}

fn check_interface(g: &Graph) -> Result<()> {
    let ins: Vec<TensorId> = g.nodes.iter().filter(|n| matches!(n.op, Op::Input { .. })).map(|n| n.output).collect();
    let outs: Vec<TensorId> = g.nodes.iter().filter(|n| matches!(n.op, Op::Output { .. })).map(|n| n.output).collect();
    let same = |a: &[TensorId], b: &[TensorId]| {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    };
    if !same(&ins, &g.inputs) {
        return Err(malformed(None, "input list does not match the input nodes"));
    }
    if !same(&outs, &g.outputs) {
        return Err(malformed(None, "output list does not match the output nodes"));
    }
    for n in &g.nodes {
        if matches!(n.op, Op::Constant) && !g.constants.contains_key(&n.output) {
            return Err(malformed(Some(n.id), "constant node without a value"));
        }
    }
    Ok(())
}

fn mismatch(n: &Node, msg: impl Into<String>) -> Error {
    Error::graph(Some(n.id), GraphFault::ShapeMismatch(msg.into()))
}

fn type_err(n: &Node, msg: impl Into<String>) -> Error {
    Error::DType { op: n.op.kind(), detail: format!("node {}: {}", n.id, msg.into()) }
}

fn matmul_shape(n: &Node, a: &TensorType, b: &TensorType) -> Result<Vec<usize>> {
    match (a.shape.as_slice(), b.shape.as_slice()) {
        (&[m, k], &[k2, cols]) if k == k2 => Ok(vec![m, cols]),
        _ => Err(mismatch(n, format!("{:?} x {:?}", a.shape, b.shape))),
    }
}

fn infer_node(g: &Graph, n: &Node, args: &[&TensorType]) -> Result<TensorType> {
    let arity = match &n.op {
        Op::Input { .. } | Op::Constant => Some(0),
        Op::Output { .. } | Op::Activation(_) | Op::Quantize(_) | Op::Dequantize(_) => Some(1),
        Op::MatMul | Op::Conv2d { .. } | Op::Add | Op::Mul | Op::Scale | Op::LoraMatMul(_) => Some(2),
        Op::QLinearConv2d { .. } => Some(2),
        Op::QLinearMatMul(_) => Some(3),
        Op::Concat => None,
    };
    if let Some(k) = arity {
        if args.len() != k {
            return Err(malformed(Some(n.id), format!("{} takes {k} inputs, got {}", n.op.kind(), args.len())));
        }
    }
    let numeric = |i: usize| -> Result<()> {
        if args[i].is_numeric() {
            Ok(())
        } else {
            Err(type_err(n, format!("input {i} is a raw integer tensor")))
        }
    };
    let raw_int = |i: usize| -> Result<()> {
        if args[i].is_raw_int() {
            Ok(())
        } else {
            Err(type_err(n, format!("input {i} must be a raw integer tensor")))
        }
    };
    Ok(match &n.op {
        Op::Input { shape, quant, .. } => match quant {
            Some(p) => TensorType { shape: shape.clone(), dtype: p.storage(), deq: None },
            None => TensorType::real(shape.clone()),
        },
        Op::Constant => {
            let t = &g.constants[&n.output];
            TensorType { shape: t.shape().to_vec(), dtype: t.dtype(), deq: None }
        }
        Op::Output { .. } => {
            numeric(0)?;
            TensorType::real(args[0].shape.clone())
        }
        Op::MatMul => {
            numeric(0)?;
            numeric(1)?;
            TensorType::real(matmul_shape(n, args[0], args[1])?)
        }
        Op::LoraMatMul(a) => {
            numeric(0)?;
            numeric(1)?;
            let shape = matmul_shape(n, args[0], args[1])?;
            let (d_out, d_in) = (args[0].shape[0], args[0].shape[1]);
            if a.rank == 0 || a.rank > d_out.min(d_in) {
                return Err(mismatch(n, format!("rank {} outside 1..={}", a.rank, d_out.min(d_in))));
            }
            TensorType::real(shape)
        }
        Op::Conv2d { stride, padding } => {
            numeric(0)?;
            numeric(1)?;
            let geom = Conv2dGeom::new(&args[0].shape, &args[1].shape, *stride, *padding)
                .map_err(|e| mismatch(n, e.to_string()))?;
            TensorType::real(geom.out_shape())
        }
        Op::Add | Op::Mul => {
            numeric(0)?;
            numeric(1)?;
            if args[0].shape != args[1].shape {
                return Err(mismatch(n, format!("{:?} vs {:?}", args[0].shape, args[1].shape)));
            }
            TensorType::real(args[0].shape.clone())
        }
        Op::Activation(_) => {
            numeric(0)?;
            TensorType::real(args[0].shape.clone())
        }
        Op::Scale => {
            numeric(0)?;
            numeric(1)?;
            if args[1].numel() != 1 {
                return Err(mismatch(n, format!("scale factor must have one element, got {:?}", args[1].shape)));
            }
            TensorType::real(args[0].shape.clone())
        }
        Op::Concat => {
            if args.is_empty() {
                return Err(malformed(Some(n.id), "concat needs at least one input"));
            }
            let mut rows = 0;
            for (i, a) in args.iter().enumerate() {
                numeric(i)?;
                match a.shape.as_slice() {
                    &[r, c] if c == args[0].shape.get(1).copied().unwrap_or(0) => rows += r,
                    _ => return Err(mismatch(n, format!("concat input {i} has shape {:?}", a.shape))),
                }
            }
            TensorType::real(vec![rows, args[0].shape[1]])
        }
        Op::Quantize(p) => {
            numeric(0)?;
            TensorType { shape: args[0].shape.clone(), dtype: p.storage(), deq: None }
        }
        Op::Dequantize(p) => {
            raw_int(0)?;
            TensorType { shape: args[0].shape.clone(), dtype: args[0].dtype, deq: Some(*p) }
        }
        Op::QLinearMatMul(q) => {
            raw_int(0)?;
            raw_int(1)?;
            let shape = matmul_shape(n, args[0], args[1])?;
            if args[2].dtype != DType::I32 || args[2].shape != [shape[0]] {
                return Err(type_err(n, "bias must be i32 with one entry per output row"));
            }
            TensorType { shape, dtype: q.out.storage(), deq: None }
        }
        Op::QLinearConv2d { stride, padding, q } => {
            raw_int(0)?;
            raw_int(1)?;
            let geom = Conv2dGeom::new(&args[0].shape, &args[1].shape, *stride, *padding)
                .map_err(|e| mismatch(n, e.to_string()))?;
            TensorType { shape: geom.out_shape(), dtype: q.out.storage(), deq: None }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::tensor::{ActKind, Tensor};

    #[test]
    fn diamond_orders_lower_branch_first() {
        let mut b = GraphBuilder::new("d", 0);
        let x = b.input("x", &[2, 2]);
        let l = b.act(x, ActKind::Relu);
        let r = b.act(x, ActKind::Silu);
        let j = b.add(l, r);
        b.output("y", j);
        let mut g = b.finish().unwrap();
        g.nodes.swap(1, 2);
        let ids: Vec<u32> = topo_sort(&g).unwrap().into_iter().map(|i| g.nodes[i].id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_graph_is_valid() {
        assert!(validate(&Graph::new("empty")).unwrap().is_empty());
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let mut b = GraphBuilder::new("c", 0);
        let x = b.input("x", &[1, 1]);
        let a = b.add(x, x);
        b.output("y", a);
        let mut g = b.finish_unchecked();
        g.nodes[1].inputs[1] = a;
        match validate(&g) {
            Err(Error::Graph { node: Some(1), fault: GraphFault::Cycle }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn matmul_inner_dims_checked() {
        let mut b = GraphBuilder::new("m", 0);
        let x = b.input("x", &[3, 4]);
        let w = b.constant(Tensor::zeros(&[2, 2]));
        let y = b.matmul(w, x);
        b.output("y", y);
        let g = b.finish_unchecked();
        match validate(&g) {
            Err(Error::Graph { node: Some(2), fault: GraphFault::ShapeMismatch(_) }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dangling_and_duplicate_producer() {
        let mut b = GraphBuilder::new("x", 0);
        let x = b.input("x", &[1, 1]);
        let a = b.act(x, ActKind::Relu);
        b.output("y", a);
        let mut g = b.finish_unchecked();
        g.nodes[1].inputs[0] = 99;
        assert!(matches!(validate(&g), Err(Error::Graph { fault: GraphFault::DanglingTensor(99), .. })));
        let mut g2 = g.clone();
        g2.nodes[1].inputs[0] = x;
        g2.nodes[1].output = x;
        assert!(matches!(validate(&g2), Err(Error::Graph { fault: GraphFault::DuplicateProducer(_), .. })));
    }
}
