//! `.qlp` layout: sealed header (`QLPK`, version, total length), adapter
//! id, then one record per slot with ids, dimensions, effective rank, bits,
//! α, factor parameters and the integer payloads of A `[d_out, r_max]` and
//! B `[r_max, d_in]`, padded with the zero point. CRC-32 trailer.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::codec::{seal, unseal, Reader, Writer};
use super::LoRASlotDescriptor;
use crate::error::{Error, Result};
use crate::graph::{LoRAAdapter, LoraFactors, NodeId};
use crate::quant::{dequantize, quantize, QuantParams, QuantProfile};
use crate::tensor::Tensor;

pub const PACK_MAGIC: &[u8; 4] = b"QLPK";
pub const PACK_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedSlot {
    pub slot_id: u32,
    pub target_node: NodeId,
    pub d_out: usize,
    pub d_in: usize,
    pub r_max: usize,
    /// Rank of the adapter before padding.
    pub rank: usize,
    pub bits: u8,
    pub alpha: f32,
    pub a_quant: QuantParams,
    pub b_quant: QuantParams,
    /// Integer payload, `[d_out, r_max]`.
    pub a: Tensor,
    /// Integer payload, `[r_max, d_in]`.
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPack {
    pub adapter_id: String,
    pub slots: Vec<PackedSlot>,
}

fn pad_cols(a: &Tensor, cols: usize) -> Result<Tensor> {
    let (rows, r) = a.dims2()?;
    let src = a.as_f32()?;
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        out[i * cols..i * cols + r].copy_from_slice(&src[i * r..(i + 1) * r]);
    }
    Tensor::from_f32(vec![rows, cols], out)
}

fn pad_rows(b: &Tensor, rows: usize) -> Result<Tensor> {
    let (r, cols) = b.dims2()?;
    let mut out = b.as_f32()?.to_vec();
    out.resize(rows * cols, 0.0);
    debug_assert!(r <= rows);
    Tensor::from_f32(vec![rows, cols], out)
}

fn take_cols(a: &Tensor, cols: usize) -> Result<Tensor> {
    let (rows, r) = a.dims2()?;
    let src = a.as_f32()?;
    let data = (0..rows).flat_map(|i| src[i * r..i * r + cols].iter().copied()).collect();
    Tensor::from_f32(vec![rows, cols], data)
}

impl LoraPack {
    /// Quantizes every factor of `adapter` under its slot's parameters,
    /// zero-padding to the slot's compile-time rank.
    pub fn build(adapter: &LoRAAdapter, slots: &[LoRASlotDescriptor], shared: &QuantProfile) -> Result<Self> {
        if adapter.id.is_empty() {
            return Err(Error::Adapter("empty adapter id".into()));
        }
        let targets: BTreeMap<NodeId, &LoRASlotDescriptor> = slots.iter().map(|d| (d.target_node, d)).collect();
        if let Some(nid) = adapter.entries.keys().find(|n| !targets.contains_key(n)) {
            return Err(Error::Adapter(format!("{}: node {nid} has no slot", adapter.id)));
        }
        let mut out = Vec::with_capacity(slots.len());
        for d in slots {
            for (t, p) in [(d.a_input, &d.a_quant), (d.b_input, &d.b_quant)] {
                if shared.weight_params.get(&t) != Some(p) {
                    return Err(Error::Coverage(format!("slot {} parameters differ from the shared profile", d.slot_id)));
                }
            }
            let f = adapter
                .entries
                .get(&d.target_node)
                .ok_or_else(|| Error::Adapter(format!("{}: no factors for node {}", adapter.id, d.target_node)))?;
            let [d_out, r_max] = d.a_shape;
            let d_in = d.b_shape[1];
            let rank = f.rank();
            if rank > r_max {
                return Err(Error::Adapter(format!("{}: rank {rank} exceeds slot rank {r_max}", adapter.id)));
            }
            if f.a.shape() != [d_out, rank] || f.b.shape() != [rank, d_in] {
                return Err(Error::Adapter(format!(
                    "{}: node {} factors {:?}, {:?} do not fit slot {:?}, {:?}",
                    adapter.id,
                    d.target_node,
                    f.a.shape(),
                    f.b.shape(),
                    d.a_shape,
                    d.b_shape
                )));
            }
            out.push(PackedSlot {
                slot_id: d.slot_id,
                target_node: d.target_node,
                d_out,
                d_in,
                r_max,
                rank,
                bits: d.bits,
                alpha: f.alpha,
                a_quant: d.a_quant,
                b_quant: d.b_quant,
                a: quantize(&pad_cols(&f.a, r_max)?, &d.a_quant)?,
                b: quantize(&pad_rows(&f.b, r_max)?, &d.b_quant)?,
            });
        }
        Ok(LoraPack { adapter_id: adapter.id.clone(), slots: out })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.str(&self.adapter_id)?;
        w.len32(self.slots.len())?;
        for s in &self.slots {
            w.u32(s.slot_id);
            w.u32(s.target_node);
            for d in [s.d_out, s.d_in, s.r_max, s.rank] {
                w.len32(d)?;
            }
            w.u8(s.bits);
            w.f32(s.alpha);
            w.params(&s.a_quant);
            w.params(&s.b_quant);
            w.tensor(&s.a)?;
            w.tensor(&s.b)?;
        }
        Ok(seal(PACK_MAGIC, PACK_VERSION, &w.buf))
    }

    /// Parses and verifies `.qlp` bytes.
    pub fn unpack(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(unseal(bytes, PACK_MAGIC, PACK_VERSION)?);
        let adapter_id = r.str()?;
        let n = r.usize()?;
        let mut slots = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let s = PackedSlot {
                slot_id: r.u32()?,
                target_node: r.u32()?,
                d_out: r.usize()?,
                d_in: r.usize()?,
                r_max: r.usize()?,
                rank: r.usize()?,
                bits: r.u8()?,
                alpha: r.f32()?,
                a_quant: r.params()?,
                b_quant: r.params()?,
                a: r.tensor()?,
                b: r.tensor()?,
            };
            if s.rank > s.r_max
                || s.a.shape() != [s.d_out, s.r_max]
                || s.b.shape() != [s.r_max, s.d_in]
                || s.a.dtype() != s.a_quant.storage()
                || s.b.dtype() != s.b_quant.storage()
            {
                return Err(Error::Format(format!("slot {} record is inconsistent", s.slot_id)));
            }
            slots.push(s);
        }
        if !r.is_done() {
            return Err(Error::Format("unread bytes after last slot".into()));
        }
        Ok(LoraPack { adapter_id, slots })
    }

    /// Dequantized factors cut back to each slot's effective rank.
    pub fn to_adapter(&self) -> Result<LoRAAdapter> {
        let mut entries = BTreeMap::new();
        for s in &self.slots {
            let a = take_cols(&dequantize(&s.a, &s.a_quant)?, s.rank)?;
            let b_full = dequantize(&s.b, &s.b_quant)?;
            let b = Tensor::from_f32(vec![s.rank, s.d_in], b_full.as_f32()?[..s.rank * s.d_in].to_vec())?;
            entries.insert(s.target_node, LoraFactors { a, b, alpha: s.alpha });
        }
        Ok(LoRAAdapter { id: self.adapter_id.clone(), entries })
    }

    /// Bytes of the integer factor payloads alone.
    pub fn payload_bytes(&self) -> usize {
        self.slots.iter().map(|s| s.a.byte_len() + s.b.byte_len()).sum()
    }

    pub(crate) fn summary(&self, total: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "magic QLPK");
        let _ = writeln!(s, "version {PACK_VERSION}");
        let _ = writeln!(s, "total_bytes {total}");
        let _ = writeln!(s, "adapter {}", self.adapter_id);
        let _ = writeln!(s, "payload_bytes {}", self.payload_bytes());
        for p in &self.slots {
            let _ = writeln!(
                s,
                "slot {} node {} rank {}/{} bits {} alpha {} bytes {}",
                p.slot_id,
                p.target_node,
                p.rank,
                p.r_max,
                p.bits,
                p.alpha,
                p.a.byte_len() + p.b.byte_len()
            );
        }
        s
    }
}

/// Quantizes and serializes `adapter` against the compiled slots.
pub fn pack_lora(adapter: &LoRAAdapter, slots: &[LoRASlotDescriptor], shared: &QuantProfile) -> Result<Vec<u8>> {
    LoraPack::build(adapter, slots, shared)?.to_bytes()
}
