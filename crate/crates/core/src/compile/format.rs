//! `.quadm` layout: a sealed header (`QADM`, version, total length), then
//! tagged sections `META GRPE GRPU GRPD WGTS PROF SLOT`, each a four-byte
//! tag and a u32 length, then a CRC-32 trailer. Graph sections hold the
//! node lists; WGTS holds every constant payload.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::codec::{seal, unseal, Reader, Writer, HEADER_LEN};
use super::pack::{LoraPack, PACK_MAGIC};
use super::{CompiledModel, LoRASlotDescriptor};
use crate::error::{Error, Result};
use crate::graph::{validate, Graph, LoraAttrs, Node, Op, QLinearAttrs};
use crate::quant::{Policy, QuantParams, QuantProfile};
use crate::tensor::ActKind;

pub const MODEL_MAGIC: &[u8; 4] = b"QADM";
pub const FORMAT_VERSION: u16 = 1;

const SECTIONS: [&[u8; 4]; 7] = [b"META", b"GRPE", b"GRPU", b"GRPD", b"WGTS", b"PROF", b"SLOT"];

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledMeta {
    pub seed: u64,
    pub policy: String,
    pub lora_bits: u8,
}

fn opt_params(w: &mut Writer, p: &Option<QuantParams>) {
    match p {
        Some(p) => {
            w.u8(1);
            w.params(p);
        }
        None => w.u8(0),
    }
}

fn read_opt_params(r: &mut Reader) -> Result<Option<QuantParams>> {
    match r.u8()? {
        0 => Ok(None),
        1 => r.params().map(Some),
        v => Err(Error::Format(format!("bad option flag {v}"))),
    }
}

fn qlinear(w: &mut Writer, q: &QLinearAttrs) {
    w.params(&q.w);
    w.params(&q.x);
    w.params(&q.out);
}

fn read_qlinear(r: &mut Reader) -> Result<QLinearAttrs> {
    Ok(QLinearAttrs { w: r.params()?, x: r.params()?, out: r.params()? })
}

fn write_op(w: &mut Writer, op: &Op) -> Result<()> {
    let tag = match op {
        Op::Input { .. } => 0,
        Op::Output { .. } => 1,
        Op::Constant => 2,
        Op::MatMul => 3,
        Op::Conv2d { .. } => 4,
        Op::Add => 5,
        Op::Mul => 6,
        Op::Activation(_) => 7,
        Op::Concat => 8,
        Op::Scale => 9,
        Op::LoraMatMul(_) => 10,
        Op::Quantize(_) => 11,
        Op::Dequantize(_) => 12,
        Op::QLinearMatMul(_) => 13,
        Op::QLinearConv2d { .. } => 14,
    };
    w.u8(tag);
    match op {
        Op::Input { name, shape, quant } => {
            w.str(name)?;
            w.shape(shape)?;
            opt_params(w, quant);
        }
        Op::Output { name } => w.str(name)?,
        Op::Conv2d { stride, padding } => {
            w.len32(*stride)?;
            w.len32(*padding)?;
        }
        Op::Activation(k) => w.str(k.name())?,
        Op::LoraMatMul(a) => {
            w.len32(a.rank)?;
            w.u32(a.a_slot);
            w.u32(a.b_slot);
            w.u32(a.alpha_slot);
            opt_params(w, &a.a_quant);
            opt_params(w, &a.b_quant);
        }
        Op::Quantize(p) | Op::Dequantize(p) => w.params(p),
        Op::QLinearMatMul(q) => qlinear(w, q),
        Op::QLinearConv2d { stride, padding, q } => {
            w.len32(*stride)?;
            w.len32(*padding)?;
            qlinear(w, q);
        }
        Op::Constant | Op::MatMul | Op::Add | Op::Mul | Op::Concat | Op::Scale => {}
    }
    Ok(())
}

fn read_op(r: &mut Reader) -> Result<Op> {
    Ok(match r.u8()? {
        0 => Op::Input { name: r.str()?, shape: r.shape()?, quant: read_opt_params(r)? },
        1 => Op::Output { name: r.str()? },
        2 => Op::Constant,
        3 => Op::MatMul,
        4 => Op::Conv2d { stride: r.usize()?, padding: r.usize()? },
        5 => Op::Add,
        6 => Op::Mul,
        7 => {
            let name = r.str()?;
            Op::Activation(ActKind::parse(&name).ok_or_else(|| Error::Format(format!("unknown activation {name}")))?)
        }
        8 => Op::Concat,
        9 => Op::Scale,
        10 => Op::LoraMatMul(LoraAttrs {
            rank: r.usize()?,
            a_slot: r.u32()?,
            b_slot: r.u32()?,
            alpha_slot: r.u32()?,
            a_quant: read_opt_params(r)?,
            b_quant: read_opt_params(r)?,
        }),
        11 => Op::Quantize(r.params()?),
        12 => Op::Dequantize(r.params()?),
        13 => Op::QLinearMatMul(read_qlinear(r)?),
        14 => Op::QLinearConv2d { stride: r.usize()?, padding: r.usize()?, q: read_qlinear(r)? },
        t => return Err(Error::Format(format!("unknown op tag {t}"))),
    })
}

fn write_ids(w: &mut Writer, ids: &[u32]) -> Result<()> {
    w.len32(ids.len())?;
    ids.iter().for_each(|&t| w.u32(t));
    Ok(())
}

fn read_ids(r: &mut Reader) -> Result<Vec<u32>> {
    let n = r.usize()?;
    (0..n).map(|_| r.u32()).collect()
}

fn write_graph(g: &Graph) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.str(&g.name)?;
    w.len32(g.nodes.len())?;
    for n in &g.nodes {
        w.u32(n.id);
        write_op(&mut w, &n.op)?;
        write_ids(&mut w, &n.inputs)?;
        w.u32(n.output);
    }
    write_ids(&mut w, &g.inputs)?;
    write_ids(&mut w, &g.outputs)?;
    Ok(w.buf)
}

fn read_graph(bytes: &[u8]) -> Result<Graph> {
    let mut r = Reader::new(bytes);
    let mut g = Graph::new(r.str()?);
    let n = r.usize()?;
    for _ in 0..n {
        let id = r.u32()?;
        let op = read_op(&mut r)?;
        let inputs = read_ids(&mut r)?;
        g.nodes.push(Node { id, op, inputs, output: r.u32()? });
    }
    g.inputs = read_ids(&mut r)?;
    g.outputs = read_ids(&mut r)?;
    finish(&r)?;
    Ok(g)
}

fn finish(r: &Reader) -> Result<()> {
    if r.is_done() {
        Ok(())
    } else {
        Err(Error::Format("unread bytes at end of section".into()))
    }
}

fn write_profile(p: &QuantProfile) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.str(&p.policy.name())?;
    w.u8(p.lora_bits);
    for map in [&p.weight_params, &p.act_params] {
        w.len32(map.len())?;
        for (&t, q) in map {
            w.u32(t);
            w.params(q);
        }
    }
    Ok(w.buf)
}

fn read_profile(bytes: &[u8]) -> Result<QuantProfile> {
    let mut r = Reader::new(bytes);
    let policy = Policy::parse(&r.str()?).map_err(|e| Error::Format(e.to_string()))?;
    let lora_bits = r.u8()?;
    let mut maps = [BTreeMap::new(), BTreeMap::new()];
    for map in &mut maps {
        for _ in 0..r.usize()? {
            let t = r.u32()?;
            map.insert(t, r.params()?);
        }
    }
    finish(&r)?;
    let [weight_params, act_params] = maps;
    Ok(QuantProfile { policy, lora_bits, weight_params, act_params })
}

fn write_slots(slots: &[LoRASlotDescriptor]) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.len32(slots.len())?;
    for s in slots {
        w.u32(s.slot_id);
        w.u32(s.target_node);
        w.u32(s.a_input);
        w.u32(s.b_input);
        w.u32(s.alpha_input);
        for d in s.a_shape.iter().chain(&s.b_shape) {
            w.len32(*d)?;
        }
        w.u8(s.bits);
        w.params(&s.a_quant);
        w.params(&s.b_quant);
    }
    Ok(w.buf)
}

fn read_slots(bytes: &[u8]) -> Result<Vec<LoRASlotDescriptor>> {
    let mut r = Reader::new(bytes);
    let n = r.usize()?;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        out.push(LoRASlotDescriptor {
            slot_id: r.u32()?,
            target_node: r.u32()?,
            a_input: r.u32()?,
            b_input: r.u32()?,
            alpha_input: r.u32()?,
            a_shape: [r.usize()?, r.usize()?],
            b_shape: [r.usize()?, r.usize()?],
            bits: r.u8()?,
            a_quant: r.params()?,
            b_quant: r.params()?,
        });
    }
    finish(&r)?;
    Ok(out)
}

impl CompiledModel {
    /// Deterministic `.quadm` encoding.
    pub fn freeze(&self) -> Result<Vec<u8>> {
        let mut meta = Writer::default();
        meta.u64(self.meta.seed);
        meta.str(&self.meta.policy)?;
        meta.u8(self.meta.lora_bits);
        meta.len32(self.steps)?;
        meta.f32(self.noise_std);

        let mut wgts = Writer::default();
        let count: usize = self.graphs().iter().map(|g| g.constants.len()).sum();
        wgts.len32(count)?;
        for (gi, g) in self.graphs().iter().enumerate() {
            for (&t, v) in &g.constants {
                wgts.u8(gi as u8);
                wgts.u32(t);
                wgts.tensor(v)?;
            }
        }

        let bodies = [
            meta.buf,
            write_graph(&self.encoder)?,
            write_graph(&self.backbone)?,
            write_graph(&self.decoder)?,
            wgts.buf,
            write_profile(&self.profile)?,
            write_slots(&self.slots)?,
        ];
        let mut w = Writer::default();
        for (tag, body) in SECTIONS.iter().zip(&bodies) {
            w.buf.extend_from_slice(*tag);
            w.len32(body.len())?;
            w.buf.extend_from_slice(body);
        }
        Ok(seal(MODEL_MAGIC, self.version, &w.buf))
    }

    /// Parses and verifies `.quadm` bytes.
    pub fn load(bytes: &[u8]) -> Result<Self> {
        let payload = unseal(bytes, MODEL_MAGIC, FORMAT_VERSION)?;
        let mut r = Reader::new(payload);
        let mut bodies: Vec<&[u8]> = Vec::with_capacity(SECTIONS.len());
        for tag in SECTIONS {
            let found = r.take(4)?;
            if found != tag {
                return Err(Error::Format(format!(
                    "expected section {}, found {}",
                    String::from_utf8_lossy(tag),
                    String::from_utf8_lossy(found)
                )));
            }
            let n = r.usize()?;
            bodies.push(r.take(n)?);
        }
        finish(&r)?;

        let mut m = Reader::new(bodies[0]);
        let meta = CompiledMeta { seed: m.u64()?, policy: m.str()?, lora_bits: m.u8()? };
        let steps = m.usize()?;
        let noise_std = m.f32()?;
        finish(&m)?;

        let mut graphs = [read_graph(bodies[1])?, read_graph(bodies[2])?, read_graph(bodies[3])?];
        let mut w = Reader::new(bodies[4]);
        for _ in 0..w.usize()? {
            let gi = w.u8()? as usize;
            let t = w.u32()?;
            let g = graphs.get_mut(gi).ok_or_else(|| Error::Format(format!("weight for graph {gi}")))?;
            if g.constants.insert(t, w.tensor()?).is_some() {
                return Err(Error::Format(format!("duplicate weight t{t}")));
            }
        }
        finish(&w)?;
        for g in &graphs {
            validate(g).map_err(|e| Error::Format(format!("graph {}: {e}", g.name)))?;
        }
        let [encoder, backbone, decoder] = graphs;
        Ok(CompiledModel {
            version: FORMAT_VERSION,
            encoder,
            backbone,
            decoder,
            steps,
            noise_std,
            profile: read_profile(bodies[5])?,
            slots: read_slots(bodies[6])?,
            meta,
        })
    }
}

/// Header fields and per-section byte counts of a `.quadm` or `.qlp` file.
pub fn inspect(bytes: &[u8]) -> Result<String> {
    if bytes.starts_with(PACK_MAGIC) {
        return Ok(LoraPack::unpack(bytes)?.summary(bytes.len()));
    }
    let payload = unseal(bytes, MODEL_MAGIC, FORMAT_VERSION)?;
    let model = CompiledModel::load(bytes)?;
    let mut s = String::new();
    let _ = writeln!(s, "magic QADM");
    let _ = writeln!(s, "version {FORMAT_VERSION}");
    let _ = writeln!(s, "total_bytes {}", bytes.len());
    let _ = writeln!(s, "header_bytes {HEADER_LEN}");
    let mut r = Reader::new(payload);
    for tag in SECTIONS {
        r.take(4)?;
        let n = r.usize()?;
        r.take(n)?;
        let _ = writeln!(s, "section {} {n}", String::from_utf8_lossy(tag));
    }
    let _ = writeln!(s, "crc_bytes 4");
    let _ = writeln!(s, "seed {}", model.meta.seed);
    let _ = writeln!(s, "policy {}", model.meta.policy);
    let _ = writeln!(s, "lora_bits {}", model.meta.lora_bits);
    let _ = writeln!(s, "steps {}", model.steps);
    for g in model.graphs() {
        let _ = writeln!(s, "graph {} nodes {} constants {}", g.name, g.nodes.len(), g.constants.len());
    }
    let _ = writeln!(s, "weight_payload_bytes {}", model.weight_bytes());
    let _ = writeln!(s, "slots {}", model.slots.len());
    for d in &model.slots {
        let _ = writeln!(
            s,
            "slot {} node {} a {:?} b {:?} bits {}",
            d.slot_id, d.target_node, d.a_shape, d.b_shape, d.bits
        );
    }
    Ok(s)
}
