//! Loading compiled models, binding adapter packs and running inference
//! out of a preplanned arena.

mod kpi;
mod memory;

pub use kpi::{kpi, rom_accounting, swap_benchmark, KPIReport, RomAccounting, SwapReport};
pub use memory::{plan_lifetimes, plan_memory, Lifetime, MemoryPlan, Slot};

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::compile::{CompiledModel, LoraPack};
use crate::error::{Error, Result};
use crate::graph::{eval_node, infer_types, run_pipeline, topo_sort, ExecCtx, Graph, Op, Sample, Stage, TensorId, TypeMap, Value};
use crate::tensor::Tensor;

/// Per-graph execution state fixed at load time.
#[derive(Debug)]
struct Program {
    order: Vec<usize>,
    types: TypeMap,
    plan: MemoryPlan,
    constants: HashMap<TensorId, Value>,
}

impl Program {
    fn new(g: &Graph) -> Result<Self> {
        let constants = g.constants.iter().map(|(&t, v)| (t, Value::plain(v.clone()))).collect();
        Ok(Program { order: topo_sort(g)?, types: infer_types(g)?, plan: plan_memory(g)?, constants })
    }

    fn read(&self, arena: &[u8], t: TensorId) -> Result<Value> {
        if let Some(v) = self.constants.get(&t) {
            return Ok(v.clone());
        }
        let ty = &self.types[&t];
        let s = &self.plan.slots[&t];
        let tensor = Tensor::from_le_bytes(ty.dtype, ty.shape.clone(), &arena[s.offset..s.offset + s.size])?;
        Ok(Value { tensor, deq: ty.deq })
    }

    fn write(&self, arena: &mut [u8], t: TensorId, v: &Value) {
        let s = &self.plan.slots[&t];
        arena[s.offset..s.offset + s.size].copy_from_slice(&v.tensor.to_le_bytes());
    }

    /// Runs `g` with every intermediate stored at its planned arena offset.
    fn execute(&self, g: &Graph, arena: &mut [u8], feeds: &[Value]) -> Result<Tensor> {
        if feeds.len() != g.inputs.len() {
            return Err(Error::Dimension { op: "feed", detail: format!("{} inputs expected, got {}", g.inputs.len(), feeds.len()) });
        }
        let ctx = ExecCtx::default();
        for &i in &self.order {
            let n = &g.nodes[i];
            let v = match &n.op {
                Op::Constant => continue,
                Op::Input { name, .. } => {
                    let k = g.inputs.iter().position(|&t| t == n.output).expect("input is listed");
                    let ty = &self.types[&n.output];
                    let f = &feeds[k];
                    if f.tensor.shape() != ty.shape.as_slice() || f.tensor.dtype() != ty.dtype {
                        return Err(Error::Dimension {
                            op: "feed",
                            detail: format!("input {name} expects {:?} {:?}", ty.dtype, ty.shape),
                        });
                    }
                    f.clone()
                }
                _ => {
                    let args: Vec<Value> = n.inputs.iter().map(|&t| self.read(arena, t)).collect::<Result<_>>()?;
                    let refs: Vec<&Value> = args.iter().collect();
                    eval_node(n, &refs, &ctx)?
                }
            };
            self.write(arena, n.output, &v);
        }
        self.read(arena, g.outputs[0])?.into_real()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Timers {
    pub init: Duration,
    pub bind: Duration,
    pub execute: Duration,
    pub binds: u32,
    pub infers: u32,
}

#[derive(Debug, Clone)]
struct Binding {
    adapter_id: String,
    /// Backbone feeds after the two data inputs, in slot order.
    feeds: Vec<Value>,
}

/// A loaded model with at most one adapter bound.
#[derive(Debug)]
pub struct Session {
    bytes: Arc<[u8]>,
    model: CompiledModel,
    programs: [Program; 3],
    arena: Vec<u8>,
    bound: Option<Binding>,
    base_checksum: u32,
    pub timers: Timers,
}

fn weights_checksum(m: &CompiledModel) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for g in m.graphs() {
        for (t, v) in &g.constants {
            h.update(&t.to_le_bytes());
            h.update(&v.to_le_bytes());
        }
    }
    h.finalize()
}

impl Session {
    /// Verifies and loads `.quadm` bytes, plans memory and allocates the
    /// arena.
    pub fn load(bytes: &[u8]) -> Result<Self> {
        Self::load_shared(Arc::from(bytes))
    }

    /// Like [`Session::load`], sharing the byte image with other sessions.
    pub fn load_shared(bytes: Arc<[u8]>) -> Result<Self> {
        let t0 = Instant::now();
        let model = CompiledModel::load(&bytes)?;
        let want = 2 + 3 * model.slots.len();
        if model.backbone.inputs.len() != want {
            return Err(Error::Format(format!("backbone has {} inputs, slots need {want}", model.backbone.inputs.len())));
        }
        let programs = [Program::new(&model.encoder)?, Program::new(&model.backbone)?, Program::new(&model.decoder)?];
        let arena = vec![0u8; programs.iter().map(|p| p.plan.arena_size).max().unwrap_or(0)];
        let base_checksum = weights_checksum(&model);
        let mut s = Session { bytes, model, programs, arena, bound: None, base_checksum, timers: Timers::default() };
        s.timers.init = t0.elapsed();
        Ok(s)
    }

    pub fn model(&self) -> &CompiledModel {
        &self.model
    }

    pub fn model_bytes(&self) -> &Arc<[u8]> {
        &self.bytes
    }

    pub fn plans(&self) -> [&MemoryPlan; 3] {
        [&self.programs[0].plan, &self.programs[1].plan, &self.programs[2].plan]
    }

    pub fn arena_bytes(&self) -> usize {
        self.arena.len()
    }

    pub fn bound_adapter(&self) -> Option<&str> {
        self.bound.as_ref().map(|b| b.adapter_id.as_str())
    }

    /// Bytes held by the bound adapter's slot buffers.
    pub fn slot_bytes(&self) -> usize {
        self.bound.as_ref().map_or(0, |b| b.feeds.iter().map(|v| v.tensor.byte_len()).sum())
    }

    /// CRC-32 over every stored weight, recomputed on each call.
    pub fn checksum(&self) -> u32 {
        weights_checksum(&self.model)
    }

    pub fn base_checksum(&self) -> u32 {
        self.base_checksum
    }

    /// Copies the factors of a `.qlp` into the slot buffers, replacing any
    /// previous binding. On error the previous binding is kept.
    pub fn bind_lora(&mut self, pack: &[u8]) -> Result<()> {
        let t0 = Instant::now();
        let pack = LoraPack::unpack(pack)?;
        if pack.slots.len() != self.model.slots.len() {
            return Err(Error::Binding(format!(
                "pack {} has {} slots, model has {}",
                pack.adapter_id,
                pack.slots.len(),
                self.model.slots.len()
            )));
        }
        let mut feeds = Vec::with_capacity(3 * pack.slots.len());
        for (d, p) in self.model.slots.iter().zip(&pack.slots) {
            let fits = p.slot_id == d.slot_id
                && p.target_node == d.target_node
                && [p.d_out, p.r_max] == d.a_shape
                && [p.r_max, p.d_in] == d.b_shape
                && p.bits == d.bits
                && p.a_quant == d.a_quant
                && p.b_quant == d.b_quant;
            if !fits {
                return Err(Error::Binding(format!("pack {} slot {} does not match the model", pack.adapter_id, p.slot_id)));
            }
            feeds.push(Value::plain(p.a.clone()));
            feeds.push(Value::plain(p.b.clone()));
            feeds.push(Value::plain(Tensor::from_f32(vec![1], vec![p.alpha])?));
        }
        self.bound = Some(Binding { adapter_id: pack.adapter_id, feeds });
        debug_assert_eq!(self.checksum(), self.base_checksum);
        self.timers.bind += t0.elapsed();
        self.timers.binds += 1;
        Ok(())
    }

    pub fn unbind(&mut self) {
        self.bound = None;
    }

    /// One full pipeline pass with noise drawn from `seed`.
    pub fn infer(&mut self, x: &Tensor, cond: &Tensor, seed: u64) -> Result<Tensor> {
        let sample = Sample::new(x.clone(), cond.clone(), seed);
        self.infer_sample(&sample)
    }

    pub fn infer_sample(&mut self, sample: &Sample) -> Result<Tensor> {
        let t0 = Instant::now();
        let Session { model, programs, arena, bound, .. } = self;
        let slot_feeds: &[Value] = match bound {
            Some(b) => &b.feeds,
            None if model.slots.is_empty() => &[],
            None => return Err(Error::Binding("model has adapter slots and none is bound".into())),
        };
        let out = run_pipeline(model.graphs(), model.steps, model.noise_std, sample, |stage, g, ins| {
            let k = match stage {
                Stage::Encoder => 0,
                Stage::Backbone(_) => 1,
                Stage::Decoder => 2,
            };
            let mut feeds: Vec<Value> = ins.iter().cloned().map(Value::plain).collect();
            if k == 1 {
                feeds.extend(slot_feeds.iter().cloned());
            }
            programs[k].execute(g, arena, &feeds)
        })?;
        self.timers.execute += t0.elapsed();
        self.timers.infers += 1;
        Ok(out)
    }
}
