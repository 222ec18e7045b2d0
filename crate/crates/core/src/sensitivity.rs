//! Quantization sensitivity scores, anchor selection and the unified
//! fallback profile.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{execute_fp, LoRAAdapter, ModelBundle, NodeId, Sample};
use crate::par::{self, Exec};
use crate::quant::{calibrate, min_max, weight_ranges, Policy, QuantProfile, QuantSim, RangeStats};
use crate::tensor::{histogram, Tensor};

pub const QSS_BINS: usize = 256;
pub const DEFAULT_TIE_EPSILON: f64 = 0.05;
const SMOOTHING: f64 = 1e-12;

/// Jensen-Shannon divergence in nats. Both inputs are smoothed by `1e-12`
/// per entry and renormalized first.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("js_divergence", format!("lengths {} and {}", p.len(), q.len())));
    }
    if p.is_empty() {
        return Err(Error::Empty("probability vector"));
    }
    let smooth = |v: &[f64]| -> Result<Vec<f64>> {
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Range("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Range(format!("probabilities sum to {sum}")));
        }
        let total: f64 = v.iter().map(|x| x + SMOOTHING).sum();
        Ok(v.iter().map(|x| (x + SMOOTHING) / total).collect())
    };
    let (p, q) = (smooth(p)?, smooth(q)?);
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (a + b) / 2.0).collect();
    let kl = |a: &[f64]| -> f64 { a.iter().zip(&m).map(|(x, y)| x * (x / y).ln()).sum() };
    Ok((0.5 * kl(&p) + 0.5 * kl(&q)).max(0.0))
}

/// JS divergence between 256-bin histograms of two outputs taken over
/// their joint value range. Identical constant outputs score 0.
pub fn output_divergence(reference: &Tensor, test: &Tensor) -> Result<f64> {
    let (a, b) = (reference.as_f32()?, test.as_f32()?);
    let (Some((lo_a, hi_a)), Some((lo_b, hi_b))) = (min_max(a), min_max(b)) else {
        return Err(Error::Empty("output tensor"));
    };
    let (lo, hi) = (lo_a.min(lo_b), hi_a.max(hi_b));
    if !(lo < hi) {
        return Ok(0.0);
    }
    let hp = histogram(reference, QSS_BINS, lo, hi)?;
    let hq = histogram(test, QSS_BINS, lo, hi)?;
    js_divergence(&hp.probabilities(), &hq.probabilities())
}

/// Mean output divergence between full-precision and simulated-quantized
/// execution over `data`.
pub fn qss(bundle: &ModelBundle, adapter: &LoRAAdapter, profile: &QuantProfile, data: &[Sample], exec: Exec) -> Result<f64> {
    let sim = QuantSim::new(bundle, profile)?;
    qss_with(&sim, bundle, adapter, data, exec)
}

pub fn qss_with(sim: &QuantSim, bundle: &ModelBundle, adapter: &LoRAAdapter, data: &[Sample], exec: Exec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("sensitivity data"));
    }
    let per_sample = par::try_map(exec, data, |_, s| {
        let fp = execute_fp(bundle, Some(adapter), s)?;
        let qs = sim.run(Some(adapter), s)?;
        output_divergence(&fp, &qs)
    })?;
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Anchor {
    Adapter(String),
    Unified,
}

impl std::fmt::Display for Anchor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Anchor::Adapter(id) => write!(f, "{id}"),
            Anchor::Unified => write!(f, "unified"),
        }
    }
}

/// Which branch of [`select_anchor`] decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorRule {
    Single,
    Argmax,
    Tie,
}

impl AnchorRule {
    pub fn name(self) -> &'static str {
        match self {
            AnchorRule::Single => "single",
            AnchorRule::Argmax => "argmax",
            AnchorRule::Tie => "tie",
        }
    }
}

/// Highest score wins, ties going to the smallest id. When the relative
/// spread `(max - min) / max` is below `tie_epsilon`, or every score is 0,
/// the adapters count as equally sensitive and the result is `Unified`.
/// A single adapter is always its own anchor.
pub fn select_anchor(scores: &BTreeMap<String, f64>, tie_epsilon: f64) -> Result<(Anchor, AnchorRule)> {
    if scores.is_empty() {
        return Err(Error::Empty("score set"));
    }
    if !(0.0..1.0).contains(&tie_epsilon) {
        return Err(Error::Param(format!("tie epsilon {tie_epsilon} outside [0, 1)")));
    }
    if let Some((id, s)) = scores.iter().find(|(_, s)| !s.is_finite() || **s < 0.0) {
        return Err(Error::Range(format!("score of {id} is {s}")));
    }
    if scores.len() == 1 {
        let id = scores.keys().next().expect("one entry").clone();
        return Ok((Anchor::Adapter(id), AnchorRule::Single));
    }
    let max = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.values().copied().fold(f64::INFINITY, f64::min);
    if max == 0.0 || max - min < tie_epsilon * max {
        return Ok((Anchor::Unified, AnchorRule::Tie));
    }
    // BTreeMap iterates in id order, so the first maximum is the smallest id
    let id = scores.iter().find(|(_, &s)| s == max).map(|(id, _)| id.clone()).expect("max is attained");
    Ok((Anchor::Adapter(id), AnchorRule::Argmax))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QSSReport {
    pub scores: BTreeMap<String, f64>,
    pub anchor: Anchor,
    pub rule: AnchorRule,
    pub tie_epsilon: f64,
}

impl QSSReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, q) in &self.scores {
            let _ = writeln!(s, "{id} {q:.9e}");
        }
        let _ = writeln!(s, "anchor {}", self.anchor);
        let _ = writeln!(s, "divergence jensen_shannon");
        let _ = writeln!(s, "rule {}", self.rule.name());
        let _ = writeln!(s, "tie_epsilon {}", self.tie_epsilon);
        s
    }
}

fn slot_set(a: &LoRAAdapter) -> BTreeSet<NodeId> {
    a.entries.keys().copied().collect()
}

/// Profile from the merged statistics of all adapters: activation ranges
/// accumulate over calibration runs with each adapter bound in turn, and
/// each LoRA slot covers the concatenation of every adapter's factor.
pub fn unified_profile(
    bundle: &ModelBundle,
    adapters: &[LoRAAdapter],
    data: &[Sample],
    policy: Policy,
    lora_bits: u8,
    exec: Exec,
) -> Result<QuantProfile> {
    let first = adapters.first().ok_or(Error::Empty("adapter list"))?;
    for a in &adapters[1..] {
        if slot_set(a) != slot_set(first) {
            return Err(Error::Coverage(format!(
                "adapters {} and {} target different layer sets",
                first.id, a.id
            )));
        }
    }
    let per_adapter = par::try_map(exec, adapters, |_, a| calibrate(bundle, Some(a), data, Exec::Sequential))?;
    let mut stats = weight_ranges(bundle, None)?;
    for s in &per_adapter {
        let acts = RangeStats { acts: s.acts.clone(), ..Default::default() };
        stats.merge(&acts);
    }
    for (n, attrs) in bundle.backbone.lora_nodes() {
        for (slot, pick) in [(attrs.a_slot, 0usize), (attrs.b_slot, 1)] {
            let mut range: Option<(f32, f32)> = None;
            for a in adapters {
                if let Some(f) = a.entries.get(&n.id) {
                    let t = if pick == 0 { &f.a } else { &f.b };
                    if let Some((lo, hi)) = min_max(t.as_f32()?) {
                        range = Some(range.map_or((lo, hi), |(l, h)| (l.min(lo), h.max(hi))));
                    }
                }
            }
            stats.weights.insert(slot, range.unwrap_or((0.0, 0.0)));
        }
    }
    stats.to_profile(policy, lora_bits)
}

/// Calibrates once per adapter, scores each under its own calibration and
/// picks the anchor. The shared profile is the anchor's calibration, or
/// the unified profile when the adapters are equally sensitive.
pub fn build_shared_profile(
    bundle: &ModelBundle,
    adapters: &[LoRAAdapter],
    data: &[Sample],
    policy: Policy,
    lora_bits: u8,
    tie_epsilon: f64,
    exec: Exec,
) -> Result<(QuantProfile, QSSReport)> {
    if adapters.is_empty() {
        return Err(Error::Empty("adapter list"));
    }
    let mut ids = BTreeSet::new();
    for a in adapters {
        if !ids.insert(a.id.as_str()) {
            return Err(Error::Adapter(format!("duplicate adapter id {}", a.id)));
        }
    }
    let evaluated = par::try_map(exec, adapters, |_, a| {
        let profile = calibrate(bundle, Some(a), data, exec)?.to_profile(policy, lora_bits)?;
        let score = qss(bundle, a, &profile, data, exec)?;
        Ok::<_, Error>((profile, score))
    })?;
    let scores: BTreeMap<String, f64> = adapters.iter().zip(&evaluated).map(|(a, (_, s))| (a.id.clone(), *s)).collect();
    let (anchor, rule) = select_anchor(&scores, tie_epsilon)?;
    let profile = match &anchor {
        Anchor::Adapter(id) => {
            let i = adapters.iter().position(|a| &a.id == id).expect("anchor is one of the adapters");
            evaluated[i].0.clone()
        }
        Anchor::Unified => unified_profile(bundle, adapters, data, policy, lora_bits, exec)?,
    };
    profile.check_coverage(bundle)?;
    Ok((profile, QSSReport { scores, anchor, rule, tie_epsilon }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(v: &[(&str, f64)]) -> BTreeMap<String, f64> {
        v.iter().map(|(k, s)| (k.to_string(), *s)).collect()
    }

    #[test]
    fn js_reference_values() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let ln2 = std::f64::consts::LN_2;
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - ln2).abs() < 1e-9);
        // ½·[½ln(½/¾) + ½ln(½/¼)] + ½·[ln(1/¾)]
        let oracle = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln()) + 0.5 * (1.0f64 / 0.75).ln();
        let got = js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((got - oracle).abs() < 1e-9);
        assert!((got - 0.215761).abs() < 1e-5);
    }

    #[test]
    fn js_rejects_bad_input() {
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[0.5, 0.4], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn anchor_rules() {
        let a = |v: &[(&str, f64)]| select_anchor(&scores(v), 0.05).unwrap().0;
        assert_eq!(a(&[("L1", 0.9), ("L2", 0.1)]), Anchor::Adapter("L1".into()));
        assert_eq!(a(&[("L1", 0.5), ("L2", 0.5)]), Anchor::Unified);
        assert_eq!(a(&[("L1", 0.5), ("L2", 0.49), ("L3", 0.2)]), Anchor::Adapter("L1".into()));
        assert_eq!(a(&[("L1", 0.0), ("L2", 0.0)]), Anchor::Unified);
        assert_eq!(a(&[("solo", 0.0)]), Anchor::Adapter("solo".into()));
        assert_eq!(
            select_anchor(&scores(&[("b", 0.9), ("a", 0.9), ("c", 0.1)]), 0.05).unwrap().0,
            Anchor::Adapter("a".into())
        );
        assert!(select_anchor(&BTreeMap::new(), 0.05).is_err());
    }

    proptest! {
        #[test]
        fn js_symmetric_and_bounded(raw_p in prop::collection::vec(0.0f64..1.0, 8), raw_q in prop::collection::vec(0.0f64..1.0, 8)) {
            let norm = |v: &[f64]| {
                let s: f64 = v.iter().sum::<f64>() + 1e-3;
                v.iter().map(|x| (x + 1e-3 / 8.0) / s).collect::<Vec<_>>()
            };
            let (p, q) = (norm(&raw_p), norm(&raw_q));
            let d1 = js_divergence(&p, &q).unwrap();
            let d2 = js_divergence(&q, &p).unwrap();
            prop_assert_eq!(d1.to_bits(), d2.to_bits());
            prop_assert!(d1 >= 0.0 && d1 <= std::f64::consts::LN_2 + 1e-9);
        }

        #[test]
        fn anchor_scale_covariant(v in prop::collection::vec(0.0f64..10.0, 1..6), c in 0.01f64..100.0) {
            let s: BTreeMap<String, f64> = v.iter().enumerate().map(|(i, x)| (format!("a{i}"), *x)).collect();
            let scaled: BTreeMap<String, f64> = s.iter().map(|(k, x)| (k.clone(), x * c)).collect();
            let (a1, _) = select_anchor(&s, 0.05).unwrap();
            let (a2, _) = select_anchor(&scaled, 0.05).unwrap();
            prop_assert_eq!(a1, a2);
        }
    }
}
