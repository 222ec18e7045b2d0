mod common;

use std::collections::BTreeMap;

use common::{fixture, toy, SYMMETRIC};
use proptest::prelude::*;
use quad_core::graph::{LoRAAdapter, LoraFactors};
use quad_core::par::Exec;
use quad_core::quant::{activation_tensors, calibrate, weight_tensors, Policy, QuantSim};
use quad_core::sensitivity::{
    build_shared_profile, js_divergence, output_divergence, qss, qss_with, select_anchor, unified_profile, Anchor,
    AnchorRule,
};
use quad_core::tensor::Tensor;
use quad_core::Error;

/// KL written out directly over the mixture, natural log.
fn js_oracle(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let kl = |x: &[f64]| -> f64 {
        x.iter().zip(&m).filter(|(a, _)| **a > 0.0).map(|(a, mm)| a * (a / mm).ln()).sum()
    };
    0.5 * kl(p) + 0.5 * kl(q)
}

#[test]
fn js_matches_direct_formula() {
    assert!((js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 0.215_761).abs() < 1e-6);
    let p = [0.1, 0.2, 0.3, 0.4];
    let q = [0.25, 0.25, 0.25, 0.25];
    assert!((js_divergence(&p, &q).unwrap() - js_oracle(&p, &q)).abs() < 1e-12);
}

#[test]
fn identical_outputs_score_zero() {
    let t = Tensor::from_f32(vec![4], vec![0.1, -2.0, 3.0, 0.5]).unwrap();
    assert_eq!(output_divergence(&t, &t).unwrap(), 0.0);
    let c = Tensor::full(&[3], 2.0);
    assert_eq!(output_divergence(&c, &c).unwrap(), 0.0);
}

#[test]
fn qss_is_zero_when_simulation_is_exact() {
    let f = toy();
    let exact = QuantSim {
        encoder: f.bundle.encoder.clone(),
        backbone: f.bundle.backbone.clone(),
        decoder: f.bundle.decoder.clone(),
        steps: f.bundle.steps,
        noise_std: f.bundle.noise_std,
    };
    let data = f.samples(3, 2);
    for a in &f.adapters {
        assert_eq!(qss_with(&exact, &f.bundle, a, &data, Exec::Parallel).unwrap(), 0.0);
    }
}

#[test]
fn qss_is_positive_and_bounded_under_w8a8() {
    let f = toy();
    let data = f.samples(4, 3);
    let a = &f.adapters[0];
    let p = calibrate(&f.bundle, Some(a), &data, Exec::Sequential).unwrap().to_profile(Policy::W8A8, 8).unwrap();
    let s = qss(&f.bundle, a, &p, &data, Exec::Sequential).unwrap();
    assert!(s > 0.0 && s <= std::f64::consts::LN_2);
    assert_eq!(s.to_bits(), qss(&f.bundle, a, &p, &data, Exec::Parallel).unwrap().to_bits());
    assert!(matches!(qss(&f.bundle, a, &p, &[], Exec::Sequential), Err(Error::Empty(_))));
}

#[test]
fn single_adapter_is_its_own_anchor() {
    let f = toy();
    let data = f.samples(2, 1);
    let (p, r) = build_shared_profile(&f.bundle, &f.adapters[..1], &data, Policy::W8A16, 8, 0.05, Exec::Parallel).unwrap();
    assert_eq!(r.anchor, Anchor::Adapter(f.adapters[0].id.clone()));
    p.check_coverage(&f.bundle).unwrap();
}

#[test]
fn identical_adapters_fall_back_to_unified() {
    let f = fixture("symmetric", SYMMETRIC);
    let data = f.samples(4, 6);
    let (p, r) = build_shared_profile(&f.bundle, &f.adapters, &data, Policy::W8A16, 8, 0.05, Exec::Parallel).unwrap();
    assert_eq!(r.anchor, Anchor::Unified);
    assert_eq!(r.rule, AnchorRule::Tie);
    let u = unified_profile(&f.bundle, &f.adapters, &data, Policy::W8A16, 8, Exec::Sequential).unwrap();
    assert_eq!(p, u);
}

#[test]
fn shared_profile_covers_every_quantizable_tensor() {
    let f = toy();
    let data = f.samples(3, 4);
    for policy in [Policy::W8A16, Policy::W8A8, Policy::Mixed(25.0)] {
        let (p, _) = build_shared_profile(&f.bundle, &f.adapters, &data, policy, 16, 0.05, Exec::Parallel).unwrap();
        for g in f.bundle.graphs() {
            for t in weight_tensors(g) {
                assert!(p.weight_params.contains_key(&t), "weight t{t}");
            }
            for t in activation_tensors(g) {
                assert!(p.act_params.contains_key(&t), "activation t{t}");
            }
        }
        for (_, a) in f.bundle.backbone.lora_nodes() {
            assert_eq!(p.weight_params[&a.a_slot].bits, 16);
            assert_eq!(p.weight_params[&a.b_slot].bits, 16);
        }
    }
}

#[test]
fn unified_slot_ranges_cover_every_adapter() {
    let f = toy();
    let data = f.samples(2, 4);
    let u = unified_profile(&f.bundle, &f.adapters, &data, Policy::W8A16, 8, Exec::Parallel).unwrap();
    for (n, attrs) in f.bundle.backbone.lora_nodes() {
        for a in &f.adapters {
            let fa = &a.entries[&n.id];
            for (slot, t) in [(attrs.a_slot, &fa.a), (attrs.b_slot, &fa.b)] {
                let p = &u.weight_params[&slot];
                let (lo, hi) = p.representable();
                for v in t.as_f32().unwrap() {
                    assert!(*v >= lo - p.scale && *v <= hi + p.scale);
                }
            }
        }
    }
}

#[test]
fn unified_rejects_mismatched_slot_sets() {
    let f = toy();
    let mut b = f.adapters[1].clone();
    b.entries.pop_last();
    let ads = vec![f.adapters[0].clone(), b];
    let r = unified_profile(&f.bundle, &ads, &f.samples(1, 0), Policy::W8A16, 8, Exec::Sequential);
    assert!(matches!(r, Err(Error::Coverage(_))));
}

#[test]
fn duplicate_ids_and_empty_lists_rejected() {
    let f = toy();
    let data = f.samples(1, 0);
    let dup = vec![f.adapters[0].clone(), f.adapters[0].clone()];
    assert!(build_shared_profile(&f.bundle, &dup, &data, Policy::W8A16, 8, 0.05, Exec::Sequential).is_err());
    assert!(matches!(
        build_shared_profile(&f.bundle, &[], &data, Policy::W8A16, 8, 0.05, Exec::Sequential),
        Err(Error::Empty(_))
    ));
}

#[test]
fn zero_adapter_still_scores() {
    let f = toy();
    let entries: BTreeMap<_, _> = f.adapters[0]
        .entries
        .iter()
        .map(|(&k, v)| {
            let z = LoraFactors { a: Tensor::zeros(v.a.shape()), b: Tensor::zeros(v.b.shape()), alpha: 1.0 };
            (k, z)
        })
        .collect();
    let zero = LoRAAdapter { id: "zero".into(), entries };
    let data = f.samples(2, 0);
    let p = calibrate(&f.bundle, Some(&zero), &data, Exec::Sequential).unwrap().to_profile(Policy::W8A8, 8).unwrap();
    let s = qss(&f.bundle, &zero, &p, &data, Exec::Sequential).unwrap();
    assert!(s.is_finite() && s >= 0.0);
}

proptest! {
    #[test]
    fn js_agrees_with_oracle(raw_p in prop::collection::vec(0.0f64..1.0, 2..32), shift in 0.0f64..1.0) {
        let n = raw_p.len();
        let sp: f64 = raw_p.iter().sum::<f64>() + 1e-9;
        let p: Vec<f64> = raw_p.iter().map(|x| (x + 1e-9 / n as f64) / sp).collect();
        let q: Vec<f64> = p.iter().enumerate().map(|(i, x)| x * (1.0 - shift) + shift * if i == 0 { 1.0 } else { 0.0 }).collect();
        let d = js_divergence(&p, &q).unwrap();
        prop_assert!((d - js_oracle(&p, &q)).abs() < 1e-9);
        prop_assert!(d >= 0.0 && d <= std::f64::consts::LN_2 + 1e-9);
    }

    #[test]
    fn anchor_is_argmax_when_spread_is_wide(v in prop::collection::vec(0.01f64..10.0, 2..6), c in 0.1f64..50.0) {
        let scores: BTreeMap<String, f64> = v.iter().enumerate().map(|(i, x)| (format!("a{i}"), *x)).collect();
        let (a, rule) = select_anchor(&scores, 0.05).unwrap();
        let scaled: BTreeMap<String, f64> = scores.iter().map(|(k, x)| (k.clone(), x * c)).collect();
        prop_assert_eq!(select_anchor(&scaled, 0.05).unwrap().0, a.clone());
        if rule == AnchorRule::Argmax {
            let best = v.iter().cloned().fold(f64::MIN, f64::max);
            let Anchor::Adapter(id) = a else { panic!("argmax names an adapter") };
            prop_assert_eq!(scores[&id], best);
        }
    }
}
