use std::collections::{HashMap, HashSet};

use crate::error::Result;
use crate::graph::{eval_node, topo_sort, validate, ExecCtx, Graph, IdAlloc, Node, Op, QLinearAttrs, TensorId, Value};
use crate::tensor::{DType, Tensor};

/// Compute nodes excluding graph outputs.
pub fn arith_op_count(g: &Graph) -> usize {
    g.nodes.iter().filter(|n| n.op.is_compute() && !matches!(n.op, Op::Output { .. })).count()
}

fn foldable(op: &Op) -> bool {
    op.is_compute() && !matches!(op, Op::Output { .. } | Op::Dequantize(_) | Op::LoraMatMul(_))
}

/// Evaluates every node whose inputs are all constants and replaces it by a
/// constant holding the result. Dequantize nodes are kept so weights stay in
/// integer storage; LoRA nodes are kept because their value depends on the
/// bound adapter. Constants left without consumers by the folding are
/// dropped.
pub fn constant_fold(g: &Graph) -> Result<Graph> {
    let order = topo_sort(g)?;
    let mut out = g.clone();
    let mut known: HashMap<TensorId, Value> = g.constants.iter().map(|(&t, v)| (t, Value::plain(v.clone()))).collect();
    let mut touched: HashSet<TensorId> = HashSet::new();
    let ctx = ExecCtx::default();
    for i in order {
        let n = &g.nodes[i];
        if !foldable(&n.op) || !n.inputs.iter().all(|t| known.contains_key(t)) {
            continue;
        }
        let args: Vec<&Value> = n.inputs.iter().map(|t| &known[t]).collect();
        let v = eval_node(n, &args, &ctx)?;
        debug_assert!(v.deq.is_none());
        touched.extend(n.inputs.iter().copied());
        out.constants.insert(n.output, v.tensor.clone());
        let slot = &mut out.nodes[i];
        slot.op = Op::Constant;
        slot.inputs.clear();
        known.insert(n.output, v);
    }
    if touched.is_empty() {
        return Ok(out);
    }
    let consumed: HashSet<TensorId> = out.nodes.iter().flat_map(|n| n.inputs.iter().copied()).collect();
    let orphan = |n: &Node| matches!(n.op, Op::Constant) && touched.contains(&n.output) && !consumed.contains(&n.output);
    let dropped: Vec<TensorId> = out.nodes.iter().filter(|n| orphan(n)).map(|n| n.output).collect();
    out.nodes.retain(|n| !orphan(n));
    for t in dropped {
        out.constants.remove(&t);
    }
    validate(&out)?;
    Ok(out)
}

/// Removes nodes with no path to a graph output. Input nodes are kept so
/// the feed interface does not change.
pub fn dead_code_eliminate(g: &Graph) -> Result<Graph> {
    let producer = g.producers();
    let mut live: HashSet<TensorId> = HashSet::new();
    let mut stack: Vec<TensorId> = g.outputs.clone();
    while let Some(t) = stack.pop() {
        if !live.insert(t) {
            continue;
        }
        if let Some(&i) = producer.get(&t) {
            stack.extend(g.nodes[i].inputs.iter().copied());
        }
    }
    let mut out = g.clone();
    out.nodes.retain(|n| live.contains(&n.output) || matches!(n.op, Op::Input { .. }));
    out.constants.retain(|t, _| live.contains(t));
    validate(&out)?;
    Ok(out)
}

struct Match {
    quant: usize,
    linear: usize,
    w_int: TensorId,
    x_int: TensorId,
    q: QLinearAttrs,
}

/// Fuses `dequantize → matmul/conv2d → quantize` into one integer node when
/// the weight side is a quantized constant. Zero-point cross terms of a
/// matmul move into a precomputed i32 bias. Patterns that do not match, or
/// whose bias would overflow i32, are left alone.
pub fn scale_fold(g: &Graph) -> Result<Graph> {
    let producer = g.producers();
    let consumers = g.consumers();
    let single_use = |t: TensorId| consumers.get(&t).map_or(0, Vec::len) == 1 && !g.outputs.contains(&t);
    let deq = |t: TensorId| -> Option<(TensorId, crate::quant::QuantParams)> {
        let n = &g.nodes[*producer.get(&t)?];
        match n.op {
            Op::Dequantize(p) => Some((n.inputs[0], p)),
            _ => None,
        }
    };
    let is_const = |t: TensorId| g.constants.contains_key(&t);

    let mut matches = Vec::new();
    for (qi, n) in g.nodes.iter().enumerate() {
        let Op::Quantize(out) = n.op else { continue };
        let raw = n.inputs[0];
        let Some(&li) = producer.get(&raw) else { continue };
        if !single_use(raw) {
            continue;
        }
        let lin = &g.nodes[li];
        let (w, x) = match lin.op {
            Op::MatMul => (lin.inputs[0], lin.inputs[1]),
            Op::Conv2d { .. } => (lin.inputs[1], lin.inputs[0]),
            _ => continue,
        };
        let (Some((w_int, pw)), Some((x_int, px))) = (deq(w), deq(x)) else { continue };
        if !is_const(w_int) {
            continue;
        }
        matches.push(Match { quant: qi, linear: li, w_int, x_int, q: QLinearAttrs { w: pw, x: px, out } });
    }
    if matches.is_empty() {
        return Ok(g.clone());
    }

    let mut out = g.clone();
    let mut ids = IdAlloc::above(g, 0);
    let mut removed: HashSet<usize> = HashSet::new();
    let mut extra = Vec::new();
    let mut fused_any = false;
    for m in matches {
        let lin = &g.nodes[m.linear];
        let op = match lin.op {
            Op::MatMul => {
                let wq = &g.constants[&m.w_int];
                let Some(bias) = matmul_bias(wq, m.q.w.zero_point, m.q.x.zero_point)? else { continue };
                let bt = ids.tensor();
                out.constants.insert(bt, bias);
                extra.push(Node { id: ids.node(), op: Op::Constant, inputs: vec![], output: bt });
                out.nodes[m.quant].inputs = vec![m.w_int, m.x_int, bt];
                Op::QLinearMatMul(m.q)
            }
            Op::Conv2d { stride, padding } => {
                out.nodes[m.quant].inputs = vec![m.x_int, m.w_int];
                Op::QLinearConv2d { stride, padding, q: m.q }
            }
            _ => unreachable!(),
        };
        out.nodes[m.quant].op = op;
        removed.insert(m.linear);
        fused_any = true;
    }
    if !fused_any {
        return Ok(g.clone());
    }
    let mut nodes: Vec<Node> =
        out.nodes.into_iter().enumerate().filter(|(i, _)| !removed.contains(i)).map(|(_, n)| n).collect();
    nodes.extend(extra);
    // Dequantize nodes that fed only fused ops are now dead.
    loop {
        let used: HashSet<TensorId> = nodes.iter().flat_map(|n| n.inputs.iter().copied()).collect();
        let before = nodes.len();
        nodes.retain(|n| !matches!(n.op, Op::Dequantize(_)) || used.contains(&n.output) || g.outputs.contains(&n.output));
        if nodes.len() == before {
            break;
        }
    }
    out.nodes = nodes;
    validate(&out)?;
    Ok(out)
}

/// `bias[i] = -z_x · Σ_k qw[i, k] + K · z_w · z_x`, or `None` if any entry
/// leaves the i32 range.
fn matmul_bias(wq: &Tensor, zw: i32, zx: i32) -> Result<Option<Tensor>> {
    let (m, k) = wq.dims2()?;
    let qw = wq.to_i32_vec()?;
    let mut bias = Vec::with_capacity(m);
    for row in qw.chunks(k.max(1)).take(m) {
        let s: i64 = row.iter().map(|&v| v as i64).sum();
        let b = -(zx as i64) * s + k as i64 * zw as i64 * zx as i64;
        match i32::try_from(b) {
            Ok(b) => bias.push(b),
            Err(_) => return Ok(None),
        }
    }
    if k == 0 {
        bias.resize(m, 0);
    }
    Tensor::from_ints(DType::I32, vec![m], &bias).map(Some)
}
