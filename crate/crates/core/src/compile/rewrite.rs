use crate::error::{Error, Result};
use crate::graph::{infer_types, malformed, Graph, IdAlloc, Node, NodeId, Op, TensorId};
use crate::quant::{QuantParams, QuantProfile};

/// A graph-level input group that receives one adapter entry at run time.
#[derive(Debug, Clone, PartialEq)]
pub struct LoRASlotDescriptor {
    pub slot_id: u32,
    pub target_node: NodeId,
    pub a_input: TensorId,
    pub b_input: TensorId,
    pub alpha_input: TensorId,
    /// `[d_out, r_max]`
    pub a_shape: [usize; 2],
    /// `[r_max, d_in]`
    pub b_shape: [usize; 2],
    pub bits: u8,
    pub a_quant: QuantParams,
    pub b_quant: QuantParams,
}

impl LoRASlotDescriptor {
    pub fn r_max(&self) -> usize {
        self.a_shape[1]
    }
}

/// Turns every `lora_matmul` into plain dataflow fed by three new graph
/// inputs: `y = W·x + α·(A·(B·x))`, with `W·x` and the low-rank path joined
/// by an add. The node keeps its id as the `W·x` matmul and the add takes
/// over its output tensor. Slot inputs reuse the node's slot tensor ids, so
/// the shared profile's slot parameters apply to them directly.
pub fn rewrite_lora_as_input(g: &Graph, shared: &QuantProfile) -> Result<(Graph, Vec<LoRASlotDescriptor>)> {
    let types = infer_types(g)?;
    let mut targets: Vec<(NodeId, _)> = g.lora_nodes().map(|(n, a)| (n.id, *a)).collect();
    if targets.is_empty() {
        return Ok((g.clone(), Vec::new()));
    }
    targets.sort_by_key(|(id, _)| *id);
    let mut out = g.clone();
    let mut ids = IdAlloc::above(g, 0);
    let mut descriptors = Vec::with_capacity(targets.len());
    for (slot_id, (nid, attrs)) in targets.into_iter().enumerate() {
        let node = g.node(nid).expect("target exists").clone();
        let [w, x] = node.inputs[..] else {
            return Err(malformed(Some(nid), "lora_matmul takes two inputs"));
        };
        let (d_out, d_in) = match types[&w].shape[..] {
            [a, b] => (a, b),
            _ => return Err(malformed(Some(nid), "weight must be rank 2")),
        };
        let r = attrs.rank;
        let param = |t: TensorId, what: &str| -> Result<QuantParams> {
            shared
                .weight_params
                .get(&t)
                .copied()
                .ok_or_else(|| Error::Coverage(format!("{what} slot t{t} of node {nid}")))
        };
        let (a_quant, b_quant) = (param(attrs.a_slot, "A")?, param(attrs.b_slot, "B")?);
        for t in [attrs.a_slot, attrs.b_slot, attrs.alpha_slot] {
            if types.contains_key(&t) {
                return Err(malformed(Some(nid), format!("slot t{t} conflicts with an existing tensor")));
            }
        }
        let mut input = |out: &mut Graph, name: String, t: TensorId, shape: Vec<usize>| {
            out.nodes.push(Node { id: ids.node(), op: Op::Input { name, shape, quant: None }, inputs: vec![], output: t });
            out.inputs.push(t);
        };
        input(&mut out, format!("lora{slot_id}.A"), attrs.a_slot, vec![d_out, r]);
        input(&mut out, format!("lora{slot_id}.B"), attrs.b_slot, vec![r, d_in]);
        input(&mut out, format!("lora{slot_id}.alpha"), attrs.alpha_slot, vec![1]);

        let (y0, u, v, scaled) = (ids.tensor(), ids.tensor(), ids.tensor(), ids.tensor());
        let n = out.node_mut(nid).expect("target exists");
        n.op = Op::MatMul;
        n.output = y0;
        let mut push = |op: Op, inputs: Vec<TensorId>, output: TensorId| {
            out.nodes.push(Node { id: ids.node(), op, inputs, output });
        };
        push(Op::MatMul, vec![attrs.b_slot, x], u);
        push(Op::MatMul, vec![attrs.a_slot, u], v);
        push(Op::Scale, vec![v, attrs.alpha_slot], scaled);
        push(Op::Add, vec![y0, scaled], node.output);

        descriptors.push(LoRASlotDescriptor {
            slot_id: slot_id as u32,
            target_node: nid,
            a_input: attrs.a_slot,
            b_input: attrs.b_slot,
            alpha_input: attrs.alpha_slot,
            a_shape: [d_out, r],
            b_shape: [r, d_in],
            bits: shared.lora_bits,
            a_quant,
            b_quant,
        });
    }
    crate::graph::validate(&out)?;
    Ok((out, descriptors))
}
