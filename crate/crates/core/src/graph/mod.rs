//! Typed dataflow graphs.
//!
//! A [`Graph`] is a list of [`Node`]s, each producing exactly one tensor.
//! Tensor ids are plain integers and are kept globally unique across the
//! three graphs of a [`ModelBundle`], so a single quantization profile can
//! be keyed by tensor id. Node storage order is irrelevant; executors
//! always go through [`topo_sort`].

mod bundle;
mod exec;
mod validate;

pub use bundle::{
    attach_lora_static, execute_fp, make_noise, run_pipeline, LoRAAdapter, LoraFactors, ModelBundle, Sample, Stage,
};
pub use exec::{eval_node, run, run_outputs, Env, ExecCtx, Mode, Value};
pub(crate) use exec::{linear_matmul, slot_value};
pub use validate::{infer_types, topo_sort, validate, TensorType, TypeMap};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, GraphFault, Result};
use crate::quant::QuantParams;
use crate::tensor::{ActKind, Tensor};

pub type NodeId = u32;
pub type TensorId = u32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraAttrs {
    /// Maximum rank any adapter may bind here.
    pub rank: usize,
    pub a_slot: TensorId,
    pub b_slot: TensorId,
    pub alpha_slot: TensorId,
    /// Fake-quantization applied to bound factors; set by materialization.
    pub a_quant: Option<QuantParams>,
    pub b_quant: Option<QuantParams>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QLinearAttrs {
    pub w: QuantParams,
    pub x: QuantParams,
    pub out: QuantParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input { name: String, shape: Vec<usize>, quant: Option<QuantParams> },
    Output { name: String },
    Constant,
    /// `[a, b]`, computes `a · b`.
    MatMul,
    /// `[x, w]`, NCHW input and OIHW weight.
    Conv2d { stride: usize, padding: usize },
    Add,
    Mul,
    Activation(ActKind),
    /// Concatenation along the feature (leading) axis.
    Concat,
    /// `[x, s]`, multiplies by the scalar `s`.
    Scale,
    /// `[w, x]`, computes `w·x + α·A·(B·x)` with A, B, α bound at run time.
    LoraMatMul(LoraAttrs),
    Quantize(QuantParams),
    Dequantize(QuantParams),
    /// `[w_q, x_q, bias]`, integer matmul with folded zero-point terms.
    QLinearMatMul(QLinearAttrs),
    /// `[x_q, w_q]`.
    QLinearConv2d { stride: usize, padding: usize, q: QLinearAttrs },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Output { .. } => "output",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Activation(_) => "activation",
            Op::Concat => "concat",
            Op::Scale => "scale",
            Op::LoraMatMul(_) => "lora_matmul",
            Op::Quantize(_) => "quantize",
            Op::Dequantize(_) => "dequantize",
            Op::QLinearMatMul(_) => "qlinear_matmul",
            Op::QLinearConv2d { .. } => "qlinear_conv2d",
        }
    }

    /// Nodes that do arithmetic at run time.
    pub fn is_compute(&self) -> bool {
        !matches!(self, Op::Input { .. } | Op::Output { .. } | Op::Constant)
    }

    fn attrs(&self) -> String {
        fn qp(p: &QuantParams) -> String {
            format!("s={:e} z={} b={}{}", p.scale, p.zero_point, p.bits, if p.signed { "s" } else { "u" })
        }
        match self {
            Op::Input { name, shape, quant } => {
                let mut s = format!("name={name} shape={shape:?}");
                if let Some(p) = quant {
                    s += &format!(" quant=({})", qp(p));
                }
                s
            }
            Op::Output { name } => format!("name={name}"),
            Op::Conv2d { stride, padding } => format!("stride={stride} padding={padding}"),
            Op::Activation(k) => format!("act={}", k.name()),
            Op::LoraMatMul(a) => format!("rank={} a=t{} b=t{} alpha=t{}", a.rank, a.a_slot, a.b_slot, a.alpha_slot),
            Op::Quantize(p) | Op::Dequantize(p) => qp(p),
            Op::QLinearMatMul(q) => format!("w=({}) x=({}) out=({})", qp(&q.w), qp(&q.x), qp(&q.out)),
            Op::QLinearConv2d { stride, padding, q } => format!(
                "stride={stride} padding={padding} x=({}) w=({}) out=({})",
                qp(&q.x),
                qp(&q.w),
                qp(&q.out)
            ),
            _ => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub op: Op,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    pub name: String,
    pub nodes: Vec<Node>,
    /// Outputs of the `Input` nodes, in feed order.
    pub inputs: Vec<TensorId>,
    /// Outputs of the `Output` nodes, in result order.
    pub outputs: Vec<TensorId>,
    /// Values of the `Constant` nodes, keyed by their output.
    pub constants: BTreeMap<TensorId, Tensor>,
}

impl Graph {
    pub fn new(name: impl Into<String>) -> Self {
        Graph { name: name.into(), ..Default::default() }
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn producers(&self) -> HashMap<TensorId, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.output, i)).collect()
    }

    /// Consumer node indices per tensor, in storage order.
    pub fn consumers(&self) -> HashMap<TensorId, Vec<usize>> {
        let mut m: HashMap<TensorId, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for &t in &n.inputs {
                m.entry(t).or_default().push(i);
            }
        }
        m
    }

    pub fn lora_nodes(&self) -> impl Iterator<Item = (&Node, &LoraAttrs)> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::LoraMatMul(a) => Some((n, a)),
            _ => None,
        })
    }

    /// Every tensor id the graph mentions, including LoRA slot ids.
    pub fn tensor_ids(&self) -> BTreeSet<TensorId> {
        let mut s = BTreeSet::new();
        for n in &self.nodes {
            s.insert(n.output);
            s.extend(n.inputs.iter().copied());
            if let Op::LoraMatMul(a) = &n.op {
                s.extend([a.a_slot, a.b_slot, a.alpha_slot]);
            }
        }
        s
    }

    pub fn max_tensor_id(&self) -> Option<TensorId> {
        self.tensor_ids().last().copied()
    }

    pub fn max_node_id(&self) -> Option<NodeId> {
        self.nodes.iter().map(|n| n.id).max()
    }

    pub fn compute_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_compute()).count()
    }

    /// Rewrites the node list into topological order.
    pub fn sort_nodes(&mut self) -> Result<()> {
        let order = topo_sort(self)?;
        let mut old: Vec<Option<Node>> = std::mem::take(&mut self.nodes).into_iter().map(Some).collect();
        self.nodes = order.into_iter().map(|i| old[i].take().expect("index visited once")).collect();
        Ok(())
    }

    /// Line-per-node text form in topological order:
    /// `id kind [in-ids] -> out-id {attrs}`.
    pub fn dump(&self) -> Result<String> {
        let order = topo_sort(self)?;
        let mut s = format!("graph {}\n", self.name);
        for i in order {
            let n = &self.nodes[i];
            let ins: Vec<String> = n.inputs.iter().map(|t| format!("t{t}")).collect();
            let _ = writeln!(s, "{} {} [{}] -> t{} {{{}}}", n.id, n.op.kind(), ins.join(", "), n.output, n.op.attrs());
        }
        Ok(s)
    }
}

/// Hands out node and tensor ids above everything already in use.
#[derive(Debug, Clone)]
pub struct IdAlloc {
    next_node: NodeId,
    next_tensor: TensorId,
}

impl IdAlloc {
    pub fn above(g: &Graph, tensor_floor: TensorId) -> Self {
        IdAlloc {
            next_node: g.max_node_id().map_or(0, |m| m + 1),
            next_tensor: g.max_tensor_id().map_or(0, |m| m + 1).max(tensor_floor),
        }
    }

    pub fn node(&mut self) -> NodeId {
        self.next_node += 1;
        self.next_node - 1
    }

    pub fn tensor(&mut self) -> TensorId {
        self.next_tensor += 1;
        self.next_tensor - 1
    }
}

/// Incremental construction with sequential ids starting at `base`.
pub struct GraphBuilder {
    g: Graph,
    next: u32,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, base: u32) -> Self {
        GraphBuilder { g: Graph::new(name), next: base }
    }

    fn fresh(&mut self) -> u32 {
        self.next += 1;
        self.next - 1
    }

    fn push(&mut self, op: Op, inputs: Vec<TensorId>) -> TensorId {
        let id = self.fresh();
        self.g.nodes.push(Node { id, op, inputs, output: id });
        id
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> TensorId {
        let t = self.push(Op::Input { name: name.into(), shape: shape.to_vec(), quant: None }, vec![]);
        self.g.inputs.push(t);
        t
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        let t = self.push(Op::Constant, vec![]);
        self.g.constants.insert(t, value);
        t
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, padding: usize) -> TensorId {
        self.push(Op::Conv2d { stride, padding }, vec![x, w])
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn act(&mut self, x: TensorId, kind: ActKind) -> TensorId {
        self.push(Op::Activation(kind), vec![x])
    }

    pub fn concat(&mut self, parts: &[TensorId]) -> TensorId {
        self.push(Op::Concat, parts.to_vec())
    }

    pub fn scale(&mut self, x: TensorId, s: TensorId) -> TensorId {
        self.push(Op::Scale, vec![x, s])
    }

    /// Adapter-capable `w·x`; returns the node id, which is also its output id.
    pub fn lora_matmul(&mut self, w: TensorId, x: TensorId, rank: usize) -> NodeId {
        let (a_slot, b_slot, alpha_slot) = (self.fresh(), self.fresh(), self.fresh());
        let attrs = LoraAttrs { rank, a_slot, b_slot, alpha_slot, a_quant: None, b_quant: None };
        self.push(Op::LoraMatMul(attrs), vec![w, x])
    }

    pub fn output(&mut self, name: &str, t: TensorId) -> TensorId {
        let o = self.push(Op::Output { name: name.into() }, vec![t]);
        self.g.outputs.push(o);
        o
    }

    pub fn finish(self) -> Result<Graph> {
        validate(&self.g)?;
        Ok(self.g)
    }

    /// Skips validation; for building deliberately malformed graphs.
    pub fn finish_unchecked(self) -> Graph {
        self.g
    }
}

pub(crate) fn malformed(node: Option<NodeId>, msg: impl Into<String>) -> Error {
    Error::graph(node, GraphFault::Malformed(msg.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_is_topological_and_stable() {
        let mut b = GraphBuilder::new("g", 0);
        let x = b.input("x", &[2, 1]);
        let w = b.constant(Tensor::eye(2));
        let y = b.matmul(w, x);
        let z = b.act(y, ActKind::Relu);
        b.output("y", z);
        let mut g = b.finish().unwrap();
        let before = g.dump().unwrap();
        g.nodes.reverse();
        assert_eq!(g.dump().unwrap(), before);
        let lines: Vec<&str> = before.lines().collect();
        assert_eq!(lines[0], "graph g");
        assert_eq!(lines[1], "0 input [] -> t0 {name=x shape=[2, 1]}");
        assert_eq!(lines[3], "2 matmul [t1, t0] -> t2 {}");
        assert_eq!(lines[4], "3 activation [t2] -> t3 {act=relu}");
    }

    #[test]
    fn id_alloc_respects_floor_and_slots() {
        let mut b = GraphBuilder::new("g", 10);
        let x = b.input("x", &[2, 1]);
        let w = b.constant(Tensor::eye(2));
        let l = b.lora_matmul(w, x, 1);
        b.output("y", l);
        let g = b.finish().unwrap();
        let mut ids = IdAlloc::above(&g, 0);
        assert_eq!(ids.tensor(), 17);
        let mut ids = IdAlloc::above(&g, 100);
        assert_eq!(ids.tensor(), 100);
        assert_eq!(ids.node(), 17);
    }
}
