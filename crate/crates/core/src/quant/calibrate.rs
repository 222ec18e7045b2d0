use std::collections::{BTreeMap, BTreeSet};

use super::profile::{activation_tensors, Policy, QuantProfile};
use super::{compute_quant_params, QuantParams};
use crate::error::{Error, Result};
use crate::graph::{run, run_pipeline, ExecCtx, Graph, LoRAAdapter, ModelBundle, Op, Sample, TensorId, Value};
use crate::par::{self, Exec};
use crate::tensor::Tensor;

/// Observed `[min, max]` per tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RangeStats {
    pub weights: BTreeMap<TensorId, (f32, f32)>,
    pub acts: BTreeMap<TensorId, (f32, f32)>,
    /// Weight entries that are LoRA factor slots.
    pub slots: BTreeSet<TensorId>,
}

pub(crate) fn min_max(values: &[f32]) -> Option<(f32, f32)> {
    let mut it = values.iter().copied();
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
}

fn widen(map: &mut BTreeMap<TensorId, (f32, f32)>, t: TensorId, r: (f32, f32)) {
    map.entry(t).and_modify(|e| *e = (e.0.min(r.0), e.1.max(r.1))).or_insert(r);
}

impl RangeStats {
    pub fn merge(&mut self, other: &RangeStats) {
        for (&t, &r) in &other.weights {
            widen(&mut self.weights, t, r);
        }
        for (&t, &r) in &other.acts {
            widen(&mut self.acts, t, r);
        }
        self.slots.extend(other.slots.iter().copied());
    }

    fn observe_env(&mut self, g: &Graph, env: &crate::graph::Env) -> Result<()> {
        for t in activation_tensors(g) {
            if let Some(r) = min_max(env[&t].real()?.as_f32()?) {
                widen(&mut self.acts, t, r);
            }
        }
        Ok(())
    }

    pub fn to_profile(&self, policy: Policy, lora_bits: u8) -> Result<QuantProfile> {
        self.to_profile_with(policy, lora_bits, |_| None)
    }

    /// Like [`to_profile`](Self::to_profile), with per-tensor activation bit
    /// overrides taking precedence over the policy.
    pub fn to_profile_with(
        &self,
        policy: Policy,
        lora_bits: u8,
        bits_for: impl Fn(TensorId) -> Option<u8>,
    ) -> Result<QuantProfile> {
        let params = |(lo, hi): (f32, f32), bits: u8| -> Result<QuantParams> {
            compute_quant_params(lo.min(0.0), hi.max(0.0), bits, true)
        };
        let mut weight_params = BTreeMap::new();
        for (&t, &r) in &self.weights {
            let bits = if self.slots.contains(&t) { lora_bits } else { Policy::WEIGHT_BITS };
            weight_params.insert(t, params(r, bits)?);
        }
        let low_precision: BTreeSet<TensorId> = match policy {
            Policy::W8A8 => self.acts.keys().copied().collect(),
            Policy::W8A16 => BTreeSet::new(),
            Policy::Mixed(pct) => {
                let mut ranked: Vec<(TensorId, f32)> = self.acts.iter().map(|(&t, &(lo, hi))| (t, hi - lo)).collect();
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let k = ((pct as f64 / 100.0) * ranked.len() as f64).ceil() as usize;
                ranked.into_iter().take(k).map(|(t, _)| t).collect()
            }
        };
        let mut act_params = BTreeMap::new();
        for (&t, &r) in &self.acts {
            let default = if low_precision.contains(&t) { 8 } else { 16 };
            act_params.insert(t, params(r, bits_for(t).unwrap_or(default))?);
        }
        Ok(QuantProfile { policy, lora_bits, weight_params, act_params })
    }
}

/// Ranges of every constant, plus LoRA factor ranges taken from `adapter`.
/// Slots the adapter does not fill get a zero range.
pub fn weight_ranges(bundle: &ModelBundle, adapter: Option<&LoRAAdapter>) -> Result<RangeStats> {
    let mut s = RangeStats::default();
    for g in bundle.graphs() {
        for (&t, c) in &g.constants {
            if let Some(r) = min_max(c.as_f32()?) {
                s.weights.insert(t, r);
            }
        }
        for (n, a) in g.lora_nodes() {
            let f = adapter.and_then(|ad| ad.entries.get(&n.id));
            for (slot, t) in [(a.a_slot, f.map(|f| &f.a)), (a.b_slot, f.map(|f| &f.b))] {
                let r = match t {
                    Some(t) => min_max(t.as_f32()?).unwrap_or((0.0, 0.0)),
                    None => (0.0, 0.0),
                };
                s.weights.insert(slot, r);
                s.slots.insert(slot);
            }
        }
    }
    Ok(s)
}

/// Runs the full-precision pipeline over `data` and records the range of
/// every weight and activation. Samples are processed independently.
pub fn calibrate(bundle: &ModelBundle, adapter: Option<&LoRAAdapter>, data: &[Sample], exec: Exec) -> Result<RangeStats> {
    if data.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    bundle.validate()?;
    if let Some(a) = adapter {
        a.validate(&bundle.backbone)?;
    }
    let ctx = match adapter {
        Some(a) => ExecCtx::with_lora(&a.entries),
        None => ExecCtx::default(),
    };
    let per_sample = par::try_map(exec, data, |_, sample| {
        let mut local = RangeStats::default();
        run_pipeline(bundle.graphs(), bundle.steps, bundle.noise_std, sample, |_, g, feeds| {
            let feeds: Vec<Value> = feeds.iter().cloned().map(Value::plain).collect();
            let env = run(g, &feeds, &ctx)?;
            local.observe_env(g, &env)?;
            env[&g.outputs[0]].real().map(|t| t.into_owned())
        })?;
        Ok::<_, Error>(local)
    })?;
    let mut stats = weight_ranges(bundle, adapter)?;
    for s in &per_sample {
        stats.merge(s);
    }
    Ok(stats)
}

/// Calibration of a standalone graph over explicit feeds (in input order).
pub fn calibrate_graph(g: &Graph, data: &[Vec<Tensor>], exec: Exec) -> Result<RangeStats> {
    if data.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    crate::graph::validate(g)?;
    let per_sample = par::try_map(exec, data, |_, feeds| {
        let feeds: Vec<Value> = feeds.iter().cloned().map(Value::plain).collect();
        let env = run(g, &feeds, &ExecCtx::default())?;
        let mut local = RangeStats::default();
        local.observe_env(g, &env)?;
        Ok::<_, Error>(local)
    })?;
    let mut stats = RangeStats::default();
    for n in &g.nodes {
        if matches!(n.op, Op::Constant) {
            if let Some(r) = min_max(g.constants[&n.output].as_f32()?) {
                stats.weights.insert(n.output, r);
            }
        }
    }
    for s in &per_sample {
        stats.merge(s);
    }
    Ok(stats)
}
