mod common;

use common::{random_fixture, rel_err, toy};
use proptest::prelude::*;
use quad_core::graph::{attach_lora_static, execute_fp, run_outputs, ExecCtx, GraphBuilder, Op, Value};
use quad_core::tensor::{ActKind, Tensor};
use quad_core::Error;

#[test]
fn toy_bundle_validates_and_runs() {
    let f = toy();
    f.bundle.validate().unwrap();
    let s = &f.samples(1, 0)[0];
    let y = execute_fp(&f.bundle, None, s).unwrap();
    assert_eq!(y.shape(), &[f.def.decoder.last().unwrap().out, f.def.tokens]);
    assert!(y.as_f32().unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn execute_fp_is_deterministic() {
    let f = toy();
    for s in f.samples(4, 9) {
        for a in [None, Some(&f.adapters[0])] {
            let y1 = execute_fp(&f.bundle, a, &s).unwrap();
            let y2 = execute_fp(&f.bundle, a, &s).unwrap();
            assert!(y1.bit_eq(&y2));
        }
    }
}

#[test]
fn adapter_changes_output() {
    let f = toy();
    let s = &f.samples(1, 3)[0];
    let base = execute_fp(&f.bundle, None, s).unwrap();
    let with = execute_fp(&f.bundle, Some(&f.adapters[0]), s).unwrap();
    assert!(base.max_abs_diff(&with).unwrap() > 0.0);
}

#[test]
fn attach_changes_only_kinds_and_target_weights() {
    let f = toy();
    let a = &f.adapters[0];
    let g = &f.bundle.backbone;
    let merged = attach_lora_static(g, a).unwrap();
    assert_eq!(g.nodes.len(), merged.nodes.len());
    assert_eq!(g.inputs, merged.inputs);
    assert_eq!(g.outputs, merged.outputs);
    let mut touched = Vec::new();
    for (n, m) in g.nodes.iter().zip(&merged.nodes) {
        assert_eq!((n.id, &n.inputs, n.output), (m.id, &m.inputs, m.output));
        if a.entries.contains_key(&n.id) {
            assert!(matches!(n.op, Op::LoraMatMul(_)));
            assert_eq!(m.op, Op::MatMul);
            touched.push(n.inputs[0]);
        } else {
            assert_eq!(n.op, m.op);
        }
    }
    assert_eq!(g.constants.len(), merged.constants.len());
    for (t, v) in &g.constants {
        let w = &merged.constants[t];
        assert_eq!(v.shape(), w.shape());
        assert_eq!(touched.contains(t), !v.bit_eq(w), "t{t}");
    }
}

#[test]
fn attach_rejects_bad_targets() {
    let f = toy();
    let mut a = f.adapters[0].clone();
    let (_, factors) = a.entries.pop_first().unwrap();
    a.entries.insert(123_456, factors.clone());
    assert!(matches!(attach_lora_static(&f.bundle.backbone, &a), Err(Error::Adapter(_))));

    let mut wide = f.adapters[0].clone();
    let (&nid, fa) = wide.entries.iter().next().unwrap();
    let (d_out, r) = fa.a.dims2().unwrap();
    let (_, d_in) = fa.b.dims2().unwrap();
    let mut fa = fa.clone();
    fa.a = Tensor::zeros(&[d_out, r + 8]);
    fa.b = Tensor::zeros(&[r + 8, d_in]);
    wide.entries.insert(nid, fa);
    assert!(matches!(attach_lora_static(&f.bundle.backbone, &wide), Err(Error::Adapter(_))));
}

#[test]
fn activation_graph_matches_elementwise_reference() {
    let mut b = GraphBuilder::new("g", 0);
    let x = b.input("x", &[1, 4]);
    let y = b.act(x, ActKind::Relu);
    b.output("y", y);
    let g = b.finish().unwrap();
    let xv = Tensor::from_f32(vec![1, 4], vec![-1.0, 0.0, 2.0, -3.5]).unwrap();
    let out = run_outputs(&g, &[Value::plain(xv)], &ExecCtx::default()).unwrap();
    assert_eq!(out[0].as_f32().unwrap(), &[0.0, 0.0, 2.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn bound_adapter_matches_statically_merged(seed in any::<u64>(), sample_seed in any::<u64>()) {
        let f = random_fixture(seed);
        let s = &f.samples(1, sample_seed)[0];
        for a in &f.adapters {
            let dynamic = execute_fp(&f.bundle, Some(a), s).unwrap();
            let mut merged = f.bundle.clone();
            merged.backbone = attach_lora_static(&f.bundle.backbone, a).unwrap();
            let fixed = execute_fp(&merged, None, s).unwrap();
            let e = rel_err(&fixed, &dynamic);
            prop_assert!(e <= 1e-5, "rel err {e}");
        }
    }
}
