use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::{malformed, topo_sort, Graph, LoraFactors, Node, NodeId, Op, TensorId};
use crate::error::{Error, Result};
use crate::quant::{dequantize, quantize, QuantParams};
use crate::tensor::{
    activation, concat_rows, conv2d_f32, conv2d_int, elementwise, matmul_f32, matmul_int, scale, BinaryOp,
    Conv2dGeom, DType, Tensor,
};

/// A runtime value: a tensor plus, for dequantized values, the parameters
/// that give its integer payload a real meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct Value {
    pub tensor: Tensor,
    pub deq: Option<QuantParams>,
}

impl Value {
    pub fn plain(tensor: Tensor) -> Self {
        Value { tensor, deq: None }
    }

    pub fn deq(tensor: Tensor, p: QuantParams) -> Self {
        Value { tensor, deq: Some(p) }
    }

    /// Real-valued view, dequantizing when needed.
    pub fn real(&self) -> Result<Cow<'_, Tensor>> {
        match &self.deq {
            Some(p) => Ok(Cow::Owned(dequantize(&self.tensor, p)?)),
            None if self.tensor.dtype() == DType::F32 => Ok(Cow::Borrowed(&self.tensor)),
            None => Err(Error::DType { op: "read", detail: "raw integer tensor used as a real value".into() }),
        }
    }

    pub fn into_real(self) -> Result<Tensor> {
        match self.deq {
            None if self.tensor.dtype() == DType::F32 => Ok(self.tensor),
            _ => Ok(self.real()?.into_owned()),
        }
    }
}

/// How quantize/dequantize nodes behave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Exact,
    /// Quantize and dequantize pass real values through unchanged and bound
    /// LoRA factors are not fake-quantized. Only used for gradient checks.
    Relaxed,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExecCtx<'a> {
    pub lora: Option<&'a BTreeMap<NodeId, LoraFactors>>,
    pub mode: Mode,
}

impl<'a> ExecCtx<'a> {
    pub fn with_lora(lora: &'a BTreeMap<NodeId, LoraFactors>) -> Self {
        ExecCtx { lora: Some(lora), mode: Mode::Exact }
    }
}

pub type Env = HashMap<TensorId, Value>;

/// `a · b`. When both operands are dequantized the product is computed
/// exactly on zero-point-centered integers and rescaled once by
/// `s_a · s_b`; otherwise both are read as reals.
pub(crate) fn linear_matmul(a: &Value, b: &Value) -> Result<Tensor> {
    let (m, k) = a.tensor.dims2()?;
    let (k2, n) = b.tensor.dims2()?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("{:?} x {:?}", a.tensor.shape(), b.tensor.shape())));
    }
    let data = match (&a.deq, &b.deq) {
        (Some(pa), Some(pb)) => {
            let acc = matmul_int(&a.tensor.to_i32_vec()?, pa.zero_point, &b.tensor.to_i32_vec()?, pb.zero_point, m, k, n);
            rescale(&acc, pa.scale * pb.scale)
        }
        _ => matmul_f32(a.real()?.as_f32()?, b.real()?.as_f32()?, m, k, n),
    };
    Tensor::from_f32(vec![m, n], data)
}

pub(crate) fn linear_conv(x: &Value, w: &Value, stride: usize, padding: usize) -> Result<Tensor> {
    let g = Conv2dGeom::new(x.tensor.shape(), w.tensor.shape(), stride, padding)?;
    let data = match (&x.deq, &w.deq) {
        (Some(px), Some(pw)) => {
            let acc = conv2d_int(&x.tensor.to_i32_vec()?, px.zero_point, &w.tensor.to_i32_vec()?, pw.zero_point, &g);
            rescale(&acc, px.scale * pw.scale)
        }
        _ => conv2d_f32(x.real()?.as_f32()?, w.real()?.as_f32()?, &g),
    };
    Tensor::from_f32(g.out_shape(), data)
}

pub(crate) fn rescale(acc: &[i64], m: f32) -> Vec<f32> {
    acc.iter().map(|&v| v as f32 * m).collect()
}

fn requantize(y: &[f32], shape: Vec<usize>, p: &QuantParams) -> Result<Tensor> {
    let q: Vec<i32> = y.iter().map(|&v| p.quantize_value(v)).collect();
    Tensor::from_ints(p.storage(), shape, &q)
}

/// Quantizes a LoRA factor into a dequantized value, or keeps it real.
pub(crate) fn slot_value(t: &Tensor, p: Option<&QuantParams>, mode: Mode) -> Result<Value> {
    match (p, mode) {
        (Some(p), Mode::Exact) => Ok(Value::deq(quantize(t, p)?, *p)),
        _ => Ok(Value::plain(t.clone())),
    }
}

/// Evaluates one non-source node. `args` follow `node.inputs`.
pub fn eval_node(node: &Node, args: &[&Value], ctx: &ExecCtx) -> Result<Value> {
    let real = |i: usize| -> Result<Cow<Tensor>> { args[i].real() };
    Ok(match &node.op {
        Op::Input { .. } | Op::Constant => return Err(malformed(Some(node.id), "source nodes are not evaluated")),
        Op::Output { .. } => Value::plain(real(0)?.into_owned()),
        Op::MatMul => Value::plain(linear_matmul(args[0], args[1])?),
        Op::Conv2d { stride, padding } => Value::plain(linear_conv(args[0], args[1], *stride, *padding)?),
        Op::Add => Value::plain(elementwise(&*real(0)?, &*real(1)?, BinaryOp::Add)?),
        Op::Mul => Value::plain(elementwise(&*real(0)?, &*real(1)?, BinaryOp::Mul)?),
        Op::Activation(k) => Value::plain(activation(&*real(0)?, *k)?),
        Op::Scale => Value::plain(scale(&*real(0)?, &*real(1)?)?),
        Op::Concat => {
            let parts: Vec<Cow<Tensor>> = (0..args.len()).map(real).collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = parts.iter().map(|c| c.as_ref()).collect();
            Value::plain(concat_rows(&refs)?)
        }
        Op::LoraMatMul(attrs) => {
            let y0 = linear_matmul(args[0], args[1])?;
            match ctx.lora.and_then(|m| m.get(&node.id)) {
                Some(f) => {
                    let a = slot_value(&f.a, attrs.a_quant.as_ref(), ctx.mode)?;
                    let b = slot_value(&f.b, attrs.b_quant.as_ref(), ctx.mode)?;
                    let u = Value::plain(linear_matmul(&b, args[1])?);
                    let v = linear_matmul(&a, &u)?;
                    let w = scale(&v, &Tensor::scalar(f.alpha))?;
                    Value::plain(elementwise(&y0, &w, BinaryOp::Add)?)
                }
                _ => Value::plain(y0),
            }
        }
        Op::Quantize(p) => match ctx.mode {
            Mode::Exact => Value::plain(quantize(&*real(0)?, p)?),
            Mode::Relaxed => Value::plain(real(0)?.into_owned()),
        },
        Op::Dequantize(p) => match ctx.mode {
            Mode::Exact => {
                let (lo, hi) = p.bounds();
                let q = &args[0].tensor;
                if q.dtype() == DType::F32 {
                    return Err(Error::DType { op: "dequantize", detail: "payload is not integer".into() });
                }
                if let Some(bad) = q.to_i32_vec()?.into_iter().find(|&v| v < lo || v > hi) {
                    return Err(Error::Integrity(format!("t{} holds {bad}, outside [{lo}, {hi}]", node.inputs[0])));
                }
                Value::deq(q.clone(), *p)
            }
            Mode::Relaxed if args[0].tensor.dtype() == DType::F32 => Value::plain(args[0].tensor.clone()),
            Mode::Relaxed => Value::plain(dequantize(&args[0].tensor, p)?),
        },
        Op::QLinearMatMul(q) => {
            let (m, k) = args[0].tensor.dims2()?;
            let (_, n) = args[1].tensor.dims2()?;
            let qw = args[0].tensor.to_i32_vec()?;
            let qx = args[1].tensor.to_i32_vec()?;
            let bias = args[2].tensor.to_i32_vec()?;
            let acc = qlinear_acc(&qw, &qx, &bias, q.w.zero_point, m, k, n);
            let y = rescale(&acc, q.w.scale * q.x.scale);
            Value::plain(requantize(&y, vec![m, n], &q.out)?)
        }
        Op::QLinearConv2d { stride, padding, q } => {
            let g = Conv2dGeom::new(args[0].tensor.shape(), args[1].tensor.shape(), *stride, *padding)?;
            let acc = conv2d_int(
                &args[0].tensor.to_i32_vec()?,
                q.x.zero_point,
                &args[1].tensor.to_i32_vec()?,
                q.w.zero_point,
                &g,
            );
            let y = rescale(&acc, q.x.scale * q.w.scale);
            Value::plain(requantize(&y, g.out_shape(), &q.out)?)
        }
    })
}

/// `Σ_k qw·qx + bias[i] - z_w · Σ_k qx[k, j]`, which equals the centered
/// product when `bias[i] = -z_x · Σ_k qw[i, k] + K · z_w · z_x`.
pub(crate) fn qlinear_acc(qw: &[i32], qx: &[i32], bias: &[i32], zw: i32, m: usize, k: usize, n: usize) -> Vec<i64> {
    let raw = matmul_int(qw, 0, qx, 0, m, k, n);
    let colsum: Vec<i64> = (0..n).map(|j| (0..k).map(|kk| qx[kk * n + j] as i64).sum()).collect();
    let mut acc = raw;
    for i in 0..m {
        for j in 0..n {
            acc[i * n + j] += bias[i] as i64 - zw as i64 * colsum[j];
        }
    }
    acc
}

fn check_feed(node: &Node, v: &Value) -> Result<()> {
    let Op::Input { shape, quant, name } = &node.op else { unreachable!() };
    if v.tensor.shape() != shape.as_slice() {
        return Err(Error::dim("feed", format!("input {name} expects {shape:?}, got {:?}", v.tensor.shape())));
    }
    match quant {
        Some(p) => {
            if v.tensor.dtype() != p.storage() {
                return Err(Error::DType { op: "feed", detail: format!("input {name} expects {:?}", p.storage()) });
            }
            let (lo, hi) = p.bounds();
            if v.tensor.to_i32_vec()?.iter().any(|&q| q < lo || q > hi) {
                return Err(Error::Integrity(format!("input {name} payload outside [{lo}, {hi}]")));
            }
        }
        None if v.tensor.dtype() != DType::F32 => {
            return Err(Error::DType { op: "feed", detail: format!("input {name} expects f32") });
        }
        None => {}
    }
    Ok(())
}

/// Runs `g` on `feeds` (in `g.inputs` order) and returns every tensor value.
pub fn run(g: &Graph, feeds: &[Value], ctx: &ExecCtx) -> Result<Env> {
    if feeds.len() != g.inputs.len() {
        return Err(Error::dim("feed", format!("{} inputs expected, got {}", g.inputs.len(), feeds.len())));
    }
    let feed_of: HashMap<TensorId, &Value> = g.inputs.iter().copied().zip(feeds).collect();
    let mut env = Env::with_capacity(g.nodes.len());
    for i in topo_sort(g)? {
        let n = &g.nodes[i];
        let v = match &n.op {
            Op::Input { .. } => {
                let v = feed_of[&n.output];
                check_feed(n, v)?;
                v.clone()
            }
            Op::Constant => Value::plain(g.constants[&n.output].clone()),
            _ => {
                let args: Vec<&Value> = n
                    .inputs
                    .iter()
                    .map(|t| env.get(t).ok_or_else(|| malformed(Some(n.id), format!("t{t} not computed"))))
                    .collect::<Result<_>>()?;
                eval_node(n, &args, ctx)?
            }
        };
        env.insert(n.output, v);
    }
    Ok(env)
}

/// Runs `g` and returns its outputs as real tensors.
pub fn run_outputs(g: &Graph, feeds: &[Value], ctx: &ExecCtx) -> Result<Vec<Tensor>> {
    let mut env = run(g, feeds, ctx)?;
    g.outputs.iter().map(|t| env.remove(t).expect("outputs are produced").into_real()).collect()
}
