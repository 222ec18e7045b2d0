//! Adapter fine-tuning against a shared quantization profile.
//!
//! The teacher is the full-precision pipeline with the adapter as it was
//! before training. The student is the simulated-quantized pipeline with
//! the adapter being trained. Gradients reach only the LoRA factors; the
//! rounding inside quantize nodes and factor fake-quantization is passed
//! straight through within the representable range and blocked outside it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{
    execute_fp, linear_matmul, make_noise, run, slot_value, Env, ExecCtx, Graph, LoRAAdapter, ModelBundle, Mode,
    NodeId, Op, Sample, TensorId, Value,
};
use crate::par::{self, Exec};
use crate::quant::{QuantParams, QuantProfile, QuantSim};
use crate::rng::Prng;
use crate::tensor::{elementwise, BinaryOp, Conv2dGeom, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub steps: usize,
    pub learning_rate: f32,
    /// Weight of the task loss against the sample targets.
    pub lambda_task: f32,
    pub batch: usize,
    /// Shuffles the sample order once before cycling through batches.
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { steps: 200, learning_rate: 1e-2, lambda_task: 0.1, batch: 4, seed: 0 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Param("distillation needs at least one step".into()));
        }
        if self.batch == 0 {
            return Err(Error::Param("batch must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Param(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.lambda_task >= 0.0) || !self.lambda_task.is_finite() {
            return Err(Error::Param(format!("lambda_task {}", self.lambda_task)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub recon: f64,
    pub task: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub recon: f64,
    pub task: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillTrace {
    pub rows: Vec<TraceRow>,
}

impl DistillTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,recon,task,total\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.9e},{:.9e},{:.9e}", r.step, r.recon, r.task, r.total);
        }
        s
    }
}

/// Mean squared error over all elements, accumulated in f64.
pub fn recon_loss(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::dim("recon_loss", format!("{:?} vs {:?}", teacher.shape(), student.shape())));
    }
    let (t, s) = (teacher.as_f32()?, student.as_f32()?);
    if t.is_empty() {
        return Err(Error::Empty("output tensor"));
    }
    let sum: f64 = t.iter().zip(s).map(|(a, b)| (*b as f64 - *a as f64).powi(2)).sum();
    Ok(sum / t.len() as f64)
}

/// Fake-quantized value and the straight-through gradient factor.
pub fn fake_quant_ste(value: f32, p: &QuantParams) -> (f32, f32) {
    (p.fake_quant_value(value), if p.in_range(value) { 1.0 } else { 0.0 })
}

/// Accumulated gradients of the loss with respect to each entry's A and B.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoraGrads {
    pub entries: BTreeMap<NodeId, (Vec<f32>, Vec<f32>)>,
}

impl LoraGrads {
    fn add(&mut self, node: NodeId, ga: &[f32], gb: &[f32]) {
        let e = self.entries.entry(node).or_insert_with(|| (vec![0.0; ga.len()], vec![0.0; gb.len()]));
        e.0.iter_mut().zip(ga).for_each(|(x, y)| *x += y);
        e.1.iter_mut().zip(gb).for_each(|(x, y)| *x += y);
    }

    fn merge(&mut self, other: &LoraGrads) {
        for (&n, (ga, gb)) in &other.entries {
            self.add(n, ga, gb);
        }
    }
}

/// `a[m×k] · b[n×k]ᵀ`
fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|t| a[i * k + t] * b[j * k + t]).sum();
        }
    }
    c
}

/// `a[k×m]ᵀ · b[k×n]`
fn matmul_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    for t in 0..k {
        for i in 0..m {
            let av = a[t * m + i];
            for j in 0..n {
                c[i * n + j] += av * b[t * n + j];
            }
        }
    }
    c
}

/// Tensors whose value never depends on a graph input.
fn constant_like(g: &Graph, order: &[usize]) -> HashSet<TensorId> {
    let mut set = HashSet::new();
    for &i in order {
        let n = &g.nodes[i];
        let is_const = match n.op {
            Op::Constant => true,
            Op::Input { .. } | Op::LoraMatMul(_) => false,
            _ => n.inputs.iter().all(|t| set.contains(t)),
        };
        if is_const {
            set.insert(n.output);
        }
    }
    set
}

fn real_vec(env: &Env, t: TensorId) -> Result<Vec<f32>> {
    Ok(env[&t].real()?.into_owned().into_f32()?)
}

/// Reverse pass over one graph execution. `out_grad` is the gradient at the
/// single output; returns the gradient at the first input.
fn backward_graph(g: &Graph, env: &Env, ctx: &ExecCtx, out_grad: Vec<f32>, grads_out: &mut LoraGrads) -> Result<Vec<f32>> {
    let order = crate::graph::topo_sort(g)?;
    let frozen = constant_like(g, &order);
    let mut grads: HashMap<TensorId, Vec<f32>> = HashMap::new();
    grads.insert(g.outputs[0], out_grad);
    let acc = |grads: &mut HashMap<TensorId, Vec<f32>>, t: TensorId, v: Vec<f32>| {
        if frozen.contains(&t) {
            return;
        }
        match grads.get_mut(&t) {
            Some(e) => e.iter_mut().zip(&v).for_each(|(x, y)| *x += y),
            None => {
                grads.insert(t, v);
            }
        }
    };
    for &i in order.iter().rev() {
        let n = &g.nodes[i];
        if matches!(n.op, Op::Input { .. } | Op::Constant) {
            continue;
        }
        let Some(gy) = grads.remove(&n.output) else { continue };
        match &n.op {
            Op::Output { .. } | Op::Dequantize(_) => acc(&mut grads, n.inputs[0], gy),
            Op::Quantize(p) => {
                let gx = match ctx.mode {
                    Mode::Exact => {
                        let x = real_vec(env, n.inputs[0])?;
                        gy.iter().zip(&x).map(|(g, &v)| if p.in_range(v) { *g } else { 0.0 }).collect()
                    }
                    Mode::Relaxed => gy,
                };
                acc(&mut grads, n.inputs[0], gx);
            }
            Op::MatMul => {
                let (m, k) = env[&n.inputs[0]].tensor.dims2()?;
                let (_, cols) = env[&n.inputs[1]].tensor.dims2()?;
                let a = real_vec(env, n.inputs[0])?;
                let b = real_vec(env, n.inputs[1])?;
                if !frozen.contains(&n.inputs[0]) {
                    acc(&mut grads, n.inputs[0], matmul_nt(&gy, &b, m, cols, k));
                }
                acc(&mut grads, n.inputs[1], matmul_tn(&a, &gy, m, k, cols));
            }
            Op::Conv2d { stride, padding } => {
                let xs = env[&n.inputs[0]].tensor.shape().to_vec();
                let ws = env[&n.inputs[1]].tensor.shape().to_vec();
                let geom = Conv2dGeom::new(&xs, &ws, *stride, *padding)?;
                let w = real_vec(env, n.inputs[1])?;
                let mut gx = vec![0.0f32; xs.iter().product()];
                geom.for_each_tap(|o, xi, wi| gx[xi] += gy[o] * w[wi]);
                acc(&mut grads, n.inputs[0], gx);
            }
            Op::Add => {
                acc(&mut grads, n.inputs[0], gy.clone());
                acc(&mut grads, n.inputs[1], gy);
            }
            Op::Mul => {
                let a = real_vec(env, n.inputs[0])?;
                let b = real_vec(env, n.inputs[1])?;
                acc(&mut grads, n.inputs[0], gy.iter().zip(&b).map(|(g, v)| g * v).collect());
                acc(&mut grads, n.inputs[1], gy.iter().zip(&a).map(|(g, v)| g * v).collect());
            }
            Op::Activation(k) => {
                let x = real_vec(env, n.inputs[0])?;
                acc(&mut grads, n.inputs[0], gy.iter().zip(&x).map(|(g, &v)| g * k.derivative(v)).collect());
            }
            Op::Scale => {
                let s = real_vec(env, n.inputs[1])?[0];
                acc(&mut grads, n.inputs[0], gy.iter().map(|g| g * s).collect());
            }
            Op::Concat => {
                let mut off = 0;
                for &t in &n.inputs {
                    let len = env[&t].tensor.numel();
                    acc(&mut grads, t, gy[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::LoraMatMul(attrs) => {
                let (d_out, d_in) = env[&n.inputs[0]].tensor.dims2()?;
                let (_, cols) = env[&n.inputs[1]].tensor.dims2()?;
                let w = real_vec(env, n.inputs[0])?;
                let x_val = &env[&n.inputs[1]];
                let x = x_val.real()?.into_owned().into_f32()?;
                let mut gx = matmul_tn(&w, &gy, d_out, d_in, cols);
                if let Some(f) = ctx.lora.and_then(|m| m.get(&n.id)) {
                    let r = f.rank();
                    let a_val = slot_value(&f.a, attrs.a_quant.as_ref(), ctx.mode)?;
                    let b_val = slot_value(&f.b, attrs.b_quant.as_ref(), ctx.mode)?;
                    let a = a_val.real()?.into_owned().into_f32()?;
                    let b = b_val.real()?.into_owned().into_f32()?;
                    let u = linear_matmul(&b_val, x_val)?.into_f32()?;
                    let alpha = f.alpha;
                    let mut ga: Vec<f32> = matmul_nt(&gy, &u, d_out, cols, r).iter().map(|v| v * alpha).collect();
                    let gu: Vec<f32> = matmul_tn(&a, &gy, d_out, r, cols).iter().map(|v| v * alpha).collect();
                    let mut gb = matmul_nt(&gu, &x, r, cols, d_in);
                    let gx_lora = matmul_tn(&b, &gu, r, d_in, cols);
                    gx.iter_mut().zip(&gx_lora).for_each(|(p, q)| *p += q);
                    if ctx.mode == Mode::Exact {
                        gate(&mut ga, f.a.as_f32()?, attrs.a_quant.as_ref());
                        gate(&mut gb, f.b.as_f32()?, attrs.b_quant.as_ref());
                    }
                    grads_out.add(n.id, &ga, &gb);
                }
                acc(&mut grads, n.inputs[1], gx);
            }
            other => {
                return Err(Error::DType { op: "backward", detail: format!("{} has no gradient rule", other.kind()) });
            }
        }
    }
    Ok(grads.remove(&g.inputs[0]).unwrap_or_else(|| vec![0.0; env[&g.inputs[0]].tensor.numel()]))
}

fn gate(g: &mut [f32], master: &[f32], p: Option<&QuantParams>) {
    if let Some(p) = p {
        for (gv, &m) in g.iter_mut().zip(master) {
            if !p.in_range(m) {
                *gv = 0.0;
            }
        }
    }
}

/// Student forward and backward for one sample against a fixed teacher
/// output. Returns the losses and the factor gradients.
pub fn loss_and_grads(
    sim: &QuantSim,
    adapter: &LoRAAdapter,
    sample: &Sample,
    teacher: &Tensor,
    lambda_task: f32,
    mode: Mode,
) -> Result<(LossParts, LoraGrads)> {
    let ctx = ExecCtx { lora: Some(&adapter.entries), mode };
    let feed = |ts: Vec<Tensor>| ts.into_iter().map(Value::plain).collect::<Vec<_>>();
    let out_of = |g: &Graph, env: &Env| -> Result<Tensor> { Ok(env[&g.outputs[0]].real()?.into_owned()) };

    let env_e = run(&sim.encoder, &feed(vec![sample.x.clone()]), &ctx)?;
    let z0 = out_of(&sim.encoder, &env_e)?;
    let eps = make_noise(z0.shape(), sample.noise_seed, sim.noise_std);
    let mut z = elementwise(&z0, &eps, BinaryOp::Add)?;
    let mut envs = Vec::with_capacity(sim.steps);
    for _ in 0..sim.steps {
        let env = run(&sim.backbone, &feed(vec![z, sample.cond.clone()]), &ctx)?;
        z = out_of(&sim.backbone, &env)?;
        envs.push(env);
    }
    let env_d = run(&sim.decoder, &feed(vec![z]), &ctx)?;
    let y = out_of(&sim.decoder, &env_d)?;

    let recon = recon_loss(teacher, &y)?;
    let n = y.numel() as f32;
    let ys = y.as_f32()?;
    let mut gy: Vec<f32> = ys.iter().zip(teacher.as_f32()?).map(|(a, b)| 2.0 * (a - b) / n).collect();
    let task = if lambda_task > 0.0 {
        let target = sample
            .target
            .as_ref()
            .ok_or_else(|| Error::Param("lambda_task > 0 needs sample targets".into()))?;
        for (g, (a, b)) in gy.iter_mut().zip(ys.iter().zip(target.as_f32()?)) {
            *g += lambda_task * 2.0 * (a - b) / n;
        }
        recon_loss(target, &y)?
    } else {
        0.0
    };
    let parts = LossParts { recon, task, total: recon + lambda_task as f64 * task };

    let mut grads = LoraGrads::default();
    let mut g = backward_graph(&sim.decoder, &env_d, &ctx, gy, &mut grads)?;
    for env in envs.iter().rev() {
        g = backward_graph(&sim.backbone, env, &ctx, g, &mut grads)?;
    }
    Ok((parts, grads))
}

/// Loss of the student without gradients; for finite-difference checks.
pub fn student_loss(sim: &QuantSim, adapter: &LoRAAdapter, sample: &Sample, teacher: &Tensor, lambda_task: f32, mode: Mode) -> Result<LossParts> {
    let y = sim.run_mode(Some(adapter), sample, mode)?;
    let recon = recon_loss(teacher, &y)?;
    let task = match (&sample.target, lambda_task > 0.0) {
        (Some(t), true) => recon_loss(t, &y)?,
        (None, true) => return Err(Error::Param("lambda_task > 0 needs sample targets".into())),
        _ => 0.0,
    };
    Ok(LossParts { recon, task, total: recon + lambda_task as f64 * task })
}

/// Fine-tunes `adapter` so its simulated-quantized output under `shared`
/// tracks its own full-precision output.
pub fn quad_finetune(
    bundle: &ModelBundle,
    adapter: &LoRAAdapter,
    shared: &QuantProfile,
    data: &[Sample],
    cfg: &DistillConfig,
) -> Result<(LoRAAdapter, DistillTrace)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("distillation data"));
    }
    adapter.validate(&bundle.backbone)?;
    let sim = QuantSim::new(bundle, shared)?;
    let teachers: Vec<Tensor> = data.iter().map(|s| execute_fp(bundle, Some(adapter), s)).collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = Prng::new(cfg.seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }

    let mut current = adapter.clone();
    let mut trace = DistillTrace::default();
    let mut cursor = 0;
    for step in 0..cfg.steps {
        let mut sum = LossParts { recon: 0.0, task: 0.0, total: 0.0 };
        let mut grads = LoraGrads::default();
        for _ in 0..cfg.batch {
            let i = order[cursor % order.len()];
            cursor += 1;
            let (l, g) = loss_and_grads(&sim, &current, &data[i], &teachers[i], cfg.lambda_task, Mode::Exact)?;
            sum.recon += l.recon;
            sum.task += l.task;
            sum.total += l.total;
            grads.merge(&g);
        }
        let b = cfg.batch as f64;
        let row = TraceRow { step, recon: sum.recon / b, task: sum.task / b, total: sum.total / b };
        if !row.total.is_finite() {
            return Err(Error::Diverged { step, loss: row.total as f32 });
        }
        trace.rows.push(row);
        let lr = cfg.learning_rate / cfg.batch as f32;
        for (nid, (ga, gb)) in &grads.entries {
            let f = current.entries.get_mut(nid).expect("gradients only for bound entries");
            for (w, g) in f.a.as_f32_mut()?.iter_mut().zip(ga) {
                *w -= lr * g;
            }
            for (w, g) in f.b.as_f32_mut()?.iter_mut().zip(gb) {
                *w -= lr * g;
            }
        }
    }
    Ok((current, trace))
}

/// Runs [`quad_finetune`] on every adapter independently. `datasets[i]`
/// belongs to `adapters[i]`. The adapter named `skip` (usually the anchor,
/// whose own calibration is the shared profile) is returned unchanged.
pub fn quad_align_all(
    bundle: &ModelBundle,
    adapters: &[LoRAAdapter],
    shared: &QuantProfile,
    datasets: &[Vec<Sample>],
    cfg: &DistillConfig,
    skip: Option<&str>,
    exec: Exec,
) -> Result<Vec<(LoRAAdapter, Option<DistillTrace>)>> {
    if datasets.len() != adapters.len() {
        return Err(Error::Param(format!("{} adapters but {} datasets", adapters.len(), datasets.len())));
    }
    let jobs: Vec<(&LoRAAdapter, &Vec<Sample>)> = adapters.iter().zip(datasets).collect();
    par::try_map(exec, &jobs, |_, (a, data)| {
        if Some(a.id.as_str()) == skip {
            return Ok(((*a).clone(), None));
        }
        let (out, trace) = quad_finetune(bundle, a, shared, data, cfg)?;
        Ok((out, Some(trace)))
    })
}
