use std::collections::BTreeMap;

use super::{quantize, QuantProfile};
use crate::error::Result;
use crate::graph::{Graph, IdAlloc, Node, Op, TensorId};

/// Makes the quantization in `profile` explicit in the graph.
///
/// * quantized constants become an integer constant plus `dequantize`;
/// * inputs listed as weights (LoRA slots) become quantized inputs plus
///   `dequantize`, so their payload is produced ahead of time;
/// * every profiled activation gets `quantize` followed by `dequantize`;
/// * `lora_matmul` nodes learn the parameters of their factor slots.
///
/// Fresh tensor ids start at `tensor_floor` or above. Tensors without
/// parameters are left untouched.
pub fn materialize(g: &Graph, profile: &QuantProfile, tensor_floor: TensorId) -> Result<Graph> {
    let mut ids = IdAlloc::above(g, tensor_floor);
    let mut out = Graph {
        name: g.name.clone(),
        nodes: Vec::with_capacity(g.nodes.len() * 3),
        inputs: g.inputs.clone(),
        outputs: g.outputs.clone(),
        constants: BTreeMap::new(),
    };
    let rename_input = |out: &mut Graph, from: TensorId, to: TensorId| {
        for t in out.inputs.iter_mut().filter(|t| **t == from) {
            *t = to;
        }
    };
    for n in &g.nodes {
        let t = n.output;
        match &n.op {
            Op::Constant => {
                let value = &g.constants[&t];
                match profile.weight_params.get(&t) {
                    Some(p) => {
                        let tq = ids.tensor();
                        out.constants.insert(tq, quantize(value, p)?);
                        out.nodes.push(Node { id: n.id, op: Op::Constant, inputs: vec![], output: tq });
                        out.nodes.push(Node { id: ids.node(), op: Op::Dequantize(*p), inputs: vec![tq], output: t });
                    }
                    None => {
                        out.constants.insert(t, value.clone());
                        out.nodes.push(n.clone());
                    }
                }
            }
            Op::Input { name, shape, quant: None } if profile.weight_params.contains_key(&t) => {
                let p = profile.weight_params[&t];
                let tq = ids.tensor();
                rename_input(&mut out, t, tq);
                let op = Op::Input { name: name.clone(), shape: shape.clone(), quant: Some(p) };
                out.nodes.push(Node { id: n.id, op, inputs: vec![], output: tq });
                out.nodes.push(Node { id: ids.node(), op: Op::Dequantize(p), inputs: vec![tq], output: t });
            }
            Op::Output { .. } | Op::Quantize(_) | Op::Dequantize(_) => out.nodes.push(n.clone()),
            op => {
                let mut node = n.clone();
                if let Op::LoraMatMul(a) = op {
                    let mut a = *a;
                    a.a_quant = profile.weight_params.get(&a.a_slot).copied();
                    a.b_quant = profile.weight_params.get(&a.b_slot).copied();
                    node.op = Op::LoraMatMul(a);
                }
                match profile.act_params.get(&t) {
                    Some(p) => {
                        let (raw, tq) = (ids.tensor(), ids.tensor());
                        if matches!(op, Op::Input { .. }) {
                            rename_input(&mut out, t, raw);
                        }
                        node.output = raw;
                        out.nodes.push(node);
                        out.nodes.push(Node { id: ids.node(), op: Op::Quantize(*p), inputs: vec![raw], output: tq });
                        out.nodes.push(Node { id: ids.node(), op: Op::Dequantize(*p), inputs: vec![tq], output: t });
                    }
                    None => out.nodes.push(node),
                }
            }
        }
    }
    crate::graph::validate(&out)?;
    Ok(out)
}
