use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{Graph, ModelBundle, Op, TensorId};
use crate::quant::QuantParams;

/// Bit-width policy. Weights are always 8-bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    W8A16,
    W8A8,
    /// The given percentage of activations, widest dynamic range first,
    /// get 8 bits; the rest get 16.
    Mixed(f32),
}

impl Policy {
    pub const WEIGHT_BITS: u8 = 8;

    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "w8a16" => Ok(Policy::W8A16),
            "w8a8" => Ok(Policy::W8A8),
            _ => {
                let pct = lower
                    .strip_prefix("mixed:")
                    .and_then(|x| x.trim_end_matches('%').parse::<f32>().ok())
                    .ok_or_else(|| Error::Param(format!("unknown policy {s:?}; expected w8a16, w8a8 or mixed:<pct>")))?;
                if !(0.0..=100.0).contains(&pct) {
                    return Err(Error::Param(format!("mixed percentage {pct} outside 0..=100")));
                }
                Ok(Policy::Mixed(pct))
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Policy::W8A16 => "w8a16".into(),
            Policy::W8A8 => "w8a8".into(),
            Policy::Mixed(p) => format!("mixed:{p}"),
        }
    }
}

/// Per-tensor parameters for a whole bundle. LoRA slot parameters live in
/// `weight_params` under the slot tensor ids.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantProfile {
    pub policy: Policy,
    pub lora_bits: u8,
    pub weight_params: BTreeMap<TensorId, QuantParams>,
    pub act_params: BTreeMap<TensorId, QuantParams>,
}

/// Constant outputs and LoRA factor slots.
pub fn weight_tensors(g: &Graph) -> Vec<TensorId> {
    let mut v = Vec::new();
    for n in &g.nodes {
        match &n.op {
            Op::Constant => v.push(n.output),
            Op::LoraMatMul(a) => v.extend([a.a_slot, a.b_slot]),
            _ => {}
        }
    }
    v.sort_unstable();
    v
}

/// Graph inputs and the outputs of compute nodes. Graph outputs are not
/// quantized: they are copies of the tensor feeding them.
pub fn activation_tensors(g: &Graph) -> Vec<TensorId> {
    let mut v: Vec<TensorId> = g
        .nodes
        .iter()
        .filter(|n| matches!(n.op, Op::Input { .. }) || n.op.is_compute())
        .map(|n| n.output)
        .collect();
    v.sort_unstable();
    v
}

impl QuantProfile {
    pub fn get(&self, t: TensorId) -> Option<&QuantParams> {
        self.weight_params.get(&t).or_else(|| self.act_params.get(&t))
    }

    pub fn check_graph(&self, g: &Graph) -> Result<()> {
        for t in weight_tensors(g) {
            if !self.weight_params.contains_key(&t) {
                return Err(Error::Coverage(format!("weight t{t} in graph {}", g.name)));
            }
        }
        for t in activation_tensors(g) {
            if !self.act_params.contains_key(&t) {
                return Err(Error::Coverage(format!("activation t{t} in graph {}", g.name)));
            }
        }
        Ok(())
    }

    pub fn check_coverage(&self, bundle: &ModelBundle) -> Result<()> {
        bundle.graphs().iter().try_for_each(|g| self.check_graph(g))
    }

    /// Key-sorted text form, one tensor per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("policy {}\nlora_bits {}\n", self.policy.name(), self.lora_bits);
        for (kind, map) in [("weight", &self.weight_params), ("act", &self.act_params)] {
            for (t, p) in map {
                let _ = writeln!(
                    s,
                    "{kind} t{t}: {{scale: {:e}, zero_point: {}, bits: {}, signed: {}}}",
                    p.scale, p.zero_point, p.bits, p.signed
                );
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut policy = None;
        let mut lora_bits = None;
        let mut weight_params = BTreeMap::new();
        let mut act_params = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (head, rest) = line.split_once(' ').ok_or_else(|| err("expected `<kind> <value>`"))?;
            match head {
                "policy" => policy = Some(Policy::parse(rest).map_err(|e| err(&e.to_string()))?),
                "lora_bits" => lora_bits = Some(rest.trim().parse::<u8>().map_err(|_| err("bad lora_bits"))?),
                "weight" | "act" => {
                    let (key, body) = rest.split_once(':').ok_or_else(|| err("missing `:`"))?;
                    let t: TensorId =
                        key.trim().strip_prefix('t').and_then(|k| k.parse().ok()).ok_or_else(|| err("bad tensor id"))?;
                    let body = body.trim().strip_prefix('{').and_then(|b| b.strip_suffix('}')).ok_or_else(|| err("missing braces"))?;
                    let mut fields = BTreeMap::new();
                    for kv in body.split(',') {
                        let (k, v) = kv.split_once(':').ok_or_else(|| err("bad field"))?;
                        fields.insert(k.trim(), v.trim());
                    }
                    let field = |k: &str| fields.get(k).copied().ok_or_else(|| err(&format!("missing {k}")));
                    let p = QuantParams::new(
                        field("scale")?.parse().map_err(|_| err("bad scale"))?,
                        field("zero_point")?.parse().map_err(|_| err("bad zero_point"))?,
                        field("bits")?.parse().map_err(|_| err("bad bits"))?,
                        field("signed")?.parse().map_err(|_| err("bad signed"))?,
                    )
                    .map_err(|e| err(&e.to_string()))?;
                    let map = if head == "weight" { &mut weight_params } else { &mut act_params };
                    if map.insert(t, p).is_some() {
                        return Err(err("duplicate tensor id"));
                    }
                }
                _ => return Err(err(&format!("unknown entry {head:?}"))),
            }
        }
        Ok(QuantProfile {
            policy: policy.ok_or(Error::Parse { line: 0, msg: "missing policy".into() })?,
            lora_bits: lora_bits.ok_or(Error::Parse { line: 0, msg: "missing lora_bits".into() })?,
            weight_params,
            act_params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::compute_quant_params;

    #[test]
    fn policy_parsing() {
        assert_eq!(Policy::parse("W8A16").unwrap(), Policy::W8A16);
        assert_eq!(Policy::parse("mixed:25").unwrap(), Policy::Mixed(25.0));
        assert!(Policy::parse("mixed:120").is_err());
        assert!(Policy::parse("w4a4").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut p = QuantProfile {
            policy: Policy::Mixed(12.5),
            lora_bits: 8,
            weight_params: BTreeMap::new(),
            act_params: BTreeMap::new(),
        };
        p.weight_params.insert(7, compute_quant_params(-0.3, 0.71, 8, true).unwrap());
        p.act_params.insert(2, compute_quant_params(-1.0, 1.0, 16, true).unwrap());
        p.act_params.insert(1_000_003, compute_quant_params(0.0, 2.55, 8, true).unwrap());
        let text = p.to_text();
        assert_eq!(QuantProfile::from_text(&text).unwrap(), p);
        let act_lines: Vec<&str> = text.lines().filter(|l| l.starts_with("act")).collect();
        assert!(act_lines[0].starts_with("act t2:"));
    }

    #[test]
    fn parse_errors_carry_line() {
        match QuantProfile::from_text("policy w8a8\nlora_bits 8\nact t1: {scale: 1}\n") {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
