use std::collections::{BTreeMap, BTreeSet};

use super::{infer_types, malformed, run_outputs, ExecCtx, Graph, NodeId, Op, TensorId, Value};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{matmul, Tensor};

/// Encoder, iterated backbone and decoder of a latent generative model.
///
/// The encoder maps `x` to a latent, seeded Gaussian noise scaled by
/// `noise_std` is added once, the backbone runs `steps` times on
/// `(latent, cond)`, and the decoder maps the final latent to the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub encoder: Graph,
    pub backbone: Graph,
    pub decoder: Graph,
    pub steps: usize,
    pub noise_std: f32,
}

impl ModelBundle {
    pub fn graphs(&self) -> [&Graph; 3] {
        [&self.encoder, &self.backbone, &self.decoder]
    }

    pub fn max_tensor_id(&self) -> TensorId {
        self.graphs().iter().filter_map(|g| g.max_tensor_id()).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let types: Vec<_> = self.graphs().iter().map(|g| infer_types(g)).collect::<Result<_>>()?;
        let arity = [(1, 1), (2, 1), (1, 1)];
        for ((g, &(ni, no)), _) in self.graphs().iter().zip(&arity).zip(&types) {
            if g.inputs.len() != ni || g.outputs.len() != no {
                return Err(malformed(None, format!("graph {} needs {ni} inputs and {no} outputs", g.name)));
            }
        }
        for g in [&self.encoder, &self.decoder] {
            if g.lora_nodes().next().is_some() {
                return Err(malformed(None, format!("adapter nodes are only allowed in the backbone, found in {}", g.name)));
            }
        }
        let (te, tu, td) = (&types[0], &types[1], &types[2]);
        let latent = &te[&self.encoder.outputs[0]].shape;
        let links = [
            (&tu[&self.backbone.inputs[0]].shape, "backbone latent input"),
            (&tu[&self.backbone.outputs[0]].shape, "backbone output"),
            (&td[&self.decoder.inputs[0]].shape, "decoder input"),
        ];
        for (shape, what) in links {
            if shape != latent {
                return Err(Error::dim("bundle", format!("{what} {shape:?} != latent {latent:?}")));
            }
        }
        let mut seen = BTreeSet::new();
        for g in self.graphs() {
            for t in g.tensor_ids() {
                if !seen.insert(t) {
                    return Err(malformed(None, format!("tensor id t{t} is used by more than one graph")));
                }
            }
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Param(format!("noise_std {}", self.noise_std)));
        }
        Ok(())
    }
}

/// One input to the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub cond: Tensor,
    pub noise_seed: u64,
    /// Task target for distillation, if any.
    pub target: Option<Tensor>,
}

impl Sample {
    pub fn new(x: Tensor, cond: Tensor, noise_seed: u64) -> Self {
        Sample { x, cond, noise_seed, target: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    /// `[d_out × r]`
    pub a: Tensor,
    /// `[r × d_in]`
    pub b: Tensor,
    pub alpha: f32,
}

impl LoraFactors {
    pub fn rank(&self) -> usize {
        self.b.shape().first().copied().unwrap_or(0)
    }
}

/// Low-rank factors keyed by the backbone node they attach to.
#[derive(Debug, Clone, PartialEq)]
pub struct LoRAAdapter {
    pub id: String,
    pub entries: BTreeMap<NodeId, LoraFactors>,
}

impl LoRAAdapter {
    pub fn validate(&self, backbone: &Graph) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Adapter("empty adapter id".into()));
        }
        let types = infer_types(backbone)?;
        for (&nid, f) in &self.entries {
            let node = backbone
                .node(nid)
                .ok_or_else(|| Error::Adapter(format!("{}: target node {nid} does not exist", self.id)))?;
            let Op::LoraMatMul(attrs) = &node.op else {
                return Err(Error::Adapter(format!("{}: node {nid} is a {}, not lora_matmul", self.id, node.op.kind())));
            };
            let w = &types[&node.inputs[0]].shape;
            check_factors(&self.id, nid, f, w[0], w[1], Some(attrs.rank))?;
        }
        Ok(())
    }
}

fn check_factors(id: &str, nid: NodeId, f: &LoraFactors, d_out: usize, d_in: usize, r_max: Option<usize>) -> Result<()> {
    let r = f.rank();
    if f.a.shape() != [d_out, r] || f.b.shape() != [r, d_in] {
        return Err(Error::Adapter(format!(
            "{id}: node {nid} expects A [{d_out}×r] and B [r×{d_in}], got {:?} and {:?}",
            f.a.shape(),
            f.b.shape()
        )));
    }
    if let Some(m) = r_max {
        if r > m {
            return Err(Error::Adapter(format!("{id}: node {nid} rank {r} exceeds maximum {m}")));
        }
    }
    if !f.alpha.is_finite() {
        return Err(Error::Adapter(format!("{id}: node {nid} has non-finite alpha")));
    }
    f.a.as_f32()?;
    f.b.as_f32()?;
    Ok(())
}

/// Folds every adapter entry into its node's weight: `W' = W + α·(A·B)`.
/// Targets may be `lora_matmul` or plain `matmul` nodes whose weight is a
/// constant; `lora_matmul` targets become `matmul`.
pub fn attach_lora_static(g: &Graph, adapter: &LoRAAdapter) -> Result<Graph> {
    let mut out = g.clone();
    for (&nid, f) in &adapter.entries {
        let node = out
            .node(nid)
            .ok_or_else(|| Error::Adapter(format!("{}: target node {nid} does not exist", adapter.id)))?
            .clone();
        let r_max = match &node.op {
            Op::LoraMatMul(a) => Some(a.rank),
            Op::MatMul => None,
            other => return Err(Error::Adapter(format!("node {nid} is a {}, cannot attach", other.kind()))),
        };
        let wid = node.inputs[0];
        let w = out
            .constants
            .get(&wid)
            .ok_or_else(|| Error::Adapter(format!("node {nid} weight t{wid} is not a constant")))?;
        let (d_out, d_in) = w.dims2()?;
        check_factors(&adapter.id, nid, f, d_out, d_in, r_max)?;
        let ab = matmul(&f.a, &f.b)?;
        let merged: Vec<f32> = w.as_f32()?.iter().zip(ab.as_f32()?).map(|(&w, &d)| w + f.alpha * d).collect();
        out.constants.insert(wid, Tensor::from_f32(vec![d_out, d_in], merged)?);
        out.node_mut(nid).expect("node exists").op = Op::MatMul;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Backbone(usize),
    Decoder,
}

pub fn make_noise(shape: &[usize], seed: u64, std: f32) -> Tensor {
    Prng::new(seed).normal_tensor(shape, std)
}

/// Drives one sample through encoder, noise, `steps` backbone iterations
/// and decoder. `run` executes a single graph on real-valued feeds and
/// returns its only output.
pub fn run_pipeline<F>(graphs: [&Graph; 3], steps: usize, noise_std: f32, sample: &Sample, mut run: F) -> Result<Tensor>
where
    F: FnMut(Stage, &Graph, &[Tensor]) -> Result<Tensor>,
{
    let z0 = run(Stage::Encoder, graphs[0], std::slice::from_ref(&sample.x))?;
    let eps = make_noise(z0.shape(), sample.noise_seed, noise_std);
    let mut z = crate::tensor::elementwise(&z0, &eps, crate::tensor::BinaryOp::Add)?;
    for step in 0..steps {
        z = run(Stage::Backbone(step), graphs[1], &[z, sample.cond.clone()])?;
    }
    run(Stage::Decoder, graphs[2], &[z])
}

pub(crate) fn plain_feeds(ts: &[Tensor]) -> Vec<Value> {
    ts.iter().cloned().map(Value::plain).collect()
}

/// Full-precision forward pass, optionally with an adapter bound.
pub fn execute_fp(bundle: &ModelBundle, adapter: Option<&LoRAAdapter>, sample: &Sample) -> Result<Tensor> {
    if let Some(a) = adapter {
        a.validate(&bundle.backbone)?;
    }
    let ctx = match adapter {
        Some(a) => ExecCtx::with_lora(&a.entries),
        None => ExecCtx::default(),
    };
    run_pipeline(bundle.graphs(), bundle.steps, bundle.noise_std, sample, |_, g, feeds| {
        Ok(run_outputs(g, &plain_feeds(feeds), &ctx)?.remove(0))
    })
}
