mod common;

use common::{all_fixtures, brute_force_arena, check_plan, occupancy_conflict, random_dag, random_lifetimes, toy, Fixture};
use proptest::prelude::*;
use quad_core::compile::{compile_bundle, pack_lora, CompiledModel};
use quad_core::graph::Sample;
use quad_core::par::Exec;
use quad_core::quant::{Policy, QuantProfile, QuantSim};
use quad_core::rng::Prng;
use quad_core::runtime::{kpi, plan_lifetimes, rom_accounting, swap_benchmark, Lifetime, Session};
use quad_core::sensitivity::build_shared_profile;
use quad_core::Error;

struct Built {
    profile: QuantProfile,
    model: Vec<u8>,
    packs: Vec<Vec<u8>>,
    data: Vec<Sample>,
}

fn build(f: &Fixture, policy: Policy) -> Built {
    let data = f.samples(4, 70);
    let profile = build_shared_profile(&f.bundle, &f.adapters, &data, policy, 8, 0.05, Exec::Parallel).unwrap().0;
    let m = compile_bundle(&f.bundle, &profile, 1).unwrap();
    let packs = f.adapters.iter().map(|a| pack_lora(a, &m.slots, &profile).unwrap()).collect();
    Built { model: m.freeze().unwrap(), profile, packs, data }
}

#[test]
fn runtime_reproduces_quantsim_bit_for_bit() {
    for f in all_fixtures() {
        for policy in [Policy::W8A16, Policy::W8A8] {
            let b = build(&f, policy);
            let sim = QuantSim::new(&f.bundle, &b.profile).unwrap();
            let mut s = Session::load(&b.model).unwrap();
            for (a, pack) in f.adapters.iter().zip(&b.packs) {
                s.bind_lora(pack).unwrap();
                assert_eq!(s.bound_adapter(), Some(a.id.as_str()));
                for x in &b.data {
                    let want = sim.run(Some(a), x).unwrap();
                    assert!(want.bit_eq(&s.infer_sample(x).unwrap()), "{} {}", f.name, a.id);
                }
            }
        }
    }
}

#[test]
fn binding_never_touches_base_weights() {
    let f = toy();
    let b = build(&f, Policy::W8A16);
    let mut s = Session::load(&b.model).unwrap();
    let base = s.checksum();
    assert_eq!(base, s.base_checksum());
    for p in b.packs.iter().chain(b.packs.iter().rev()) {
        s.bind_lora(p).unwrap();
        s.infer_sample(&b.data[0]).unwrap();
        assert_eq!(s.checksum(), base);
    }
}

#[test]
fn rebinding_matches_fresh_binding() {
    let f = toy();
    let b = build(&f, Policy::W8A8);
    let mut swapped = Session::load(&b.model).unwrap();
    swapped.bind_lora(&b.packs[0]).unwrap();
    swapped.infer_sample(&b.data[0]).unwrap();
    swapped.bind_lora(&b.packs[1]).unwrap();
    let mut fresh = Session::load(&b.model).unwrap();
    fresh.bind_lora(&b.packs[1]).unwrap();
    for x in &b.data {
        assert!(swapped.infer_sample(x).unwrap().bit_eq(&fresh.infer_sample(x).unwrap()));
    }
}

#[test]
fn rejected_pack_keeps_previous_binding() {
    let f = toy();
    let b = build(&f, Policy::W8A16);
    let other = build(&common::fixture("symmetric", common::SYMMETRIC), Policy::W8A16);
    let mut s = Session::load(&b.model).unwrap();
    s.bind_lora(&b.packs[0]).unwrap();
    let before = s.infer_sample(&b.data[0]).unwrap();
    assert!(matches!(s.bind_lora(&other.packs[0]), Err(Error::Binding(_))));
    let mut corrupt = b.packs[1].clone();
    let n = corrupt.len();
    corrupt[n / 2] ^= 0x10;
    assert!(s.bind_lora(&corrupt).is_err());
    assert_eq!(s.bound_adapter(), Some(f.adapters[0].id.as_str()));
    assert!(s.infer_sample(&b.data[0]).unwrap().bit_eq(&before));
}

#[test]
fn inference_needs_a_binding() {
    let f = toy();
    let b = build(&f, Policy::W8A16);
    let mut s = Session::load(&b.model).unwrap();
    assert!(matches!(s.infer_sample(&b.data[0]), Err(Error::Binding(_))));
    s.bind_lora(&b.packs[0]).unwrap();
    s.infer_sample(&b.data[0]).unwrap();
    s.unbind();
    assert!(s.bound_adapter().is_none());
    assert!(matches!(s.infer_sample(&b.data[0]), Err(Error::Binding(_))));
}

#[test]
fn zero_weights_give_zero_output() {
    let f = toy();
    let mut bundle = f.bundle.clone();
    for g in [&mut bundle.encoder, &mut bundle.backbone, &mut bundle.decoder] {
        for t in g.constants.values_mut() {
            t.as_f32_mut().unwrap().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut adapters = f.adapters.clone();
    for a in &mut adapters {
        for fa in a.entries.values_mut() {
            fa.a.as_f32_mut().unwrap().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let data = f.samples(2, 3);
    let p = build_shared_profile(&bundle, &adapters, &data, Policy::W8A8, 8, 0.05, Exec::Sequential).unwrap().0;
    let m = compile_bundle(&bundle, &p, 0).unwrap();
    let mut s = Session::load(&m.freeze().unwrap()).unwrap();
    s.bind_lora(&pack_lora(&adapters[0], &m.slots, &p).unwrap()).unwrap();
    for x in &data {
        assert!(s.infer_sample(x).unwrap().as_f32().unwrap().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn session_rejects_damaged_models() {
    let f = toy();
    let b = build(&f, Policy::W8A16);
    let mut bad = b.model.clone();
    bad[b.model.len() - 5] ^= 1;
    assert!(Session::load(&bad).is_err());
    assert!(Session::load(&b.model[..20]).is_err());
    assert!(Session::load(&b.packs[0]).is_err());
}

#[test]
fn swap_benchmark_needs_three_reps() {
    let f = toy();
    let b = build(&f, Policy::W8A16);
    let mut s = Session::load(&b.model).unwrap();
    assert!(matches!(swap_benchmark(&mut s, &b.packs[0], &b.packs[1], 2), Err(Error::Param(_))));
    let r = swap_benchmark(&mut s, &b.packs[0], &b.packs[1], 3).unwrap();
    assert_eq!(r.reps, 3);
    assert!(r.swap_ms >= 0.0 && r.reload_ms > 0.0);
}

#[test]
fn rom_accounting_matches_hand_sums() {
    let r = rom_accounting(1400.0, &[120.0; 10]).unwrap();
    assert_eq!((r.n_usecases, r.separate_total, r.shared_total), (10, 15200.0, 2600.0));
    assert!((r.memory_ratio - 15200.0 / 2600.0).abs() < 1e-12);
    assert!((r.memory_ratio - 5.85).abs() < 0.01);
    let r = rom_accounting(1375.0, &[119.0, 119.0]).unwrap();
    assert_eq!((r.separate_total, r.shared_total), (2988.0, 1613.0));
    assert!((r.memory_ratio - 1.85).abs() < 0.01);
    assert!(matches!(rom_accounting(1.0, &[]), Err(Error::Empty(_))));
}

#[test]
fn kpi_report_accounts_for_every_pack() {
    let f = toy();
    let b = build(&f, Policy::W8A16);
    let mut s = Session::load(&b.model).unwrap();
    let r = kpi(&mut s, &b.packs, &b.data[..2]).unwrap();
    let lora: usize = b.packs.iter().map(Vec::len).sum();
    assert_eq!(r.shared_rom_bytes, b.model.len());
    assert_eq!(r.lora_rom_bytes, lora);
    assert_eq!(r.separate_total_bytes, 2 * b.model.len() + lora);
    assert_eq!(r.shared_total_bytes, b.model.len() + lora);
    assert_eq!(r.peak_ram_bytes, r.arena_bytes + r.slot_bytes);
    assert!(r.memory_ratio > 1.0);
    assert_eq!(s.timers.infers, 4);
    assert_eq!(r.to_text().lines().count(), r.to_csv().lines().next().unwrap().split(',').count());
    assert!(matches!(kpi(&mut s, &[], &b.data), Err(Error::Empty(_))));
}

#[test]
fn bundle_plans_are_valid() {
    for f in all_fixtures() {
        for g in f.bundle.graphs() {
            check_plan(g, 1);
        }
    }
}

#[test]
fn arena_is_near_the_optimum() {
    let mut r = Prng::new(77);
    let mut worst: f64 = 1.0;
    for _ in 0..300 {
        let n = 1 + r.below(6);
        let reqs = random_lifetimes(&mut r, n, 8);
        let (offs, arena) = plan_lifetimes(&reqs);
        assert_eq!(occupancy_conflict(&reqs, &offs, arena), None);
        let best = brute_force_arena(&reqs);
        assert!(arena >= best);
        worst = worst.max(arena as f64 / best as f64);
    }
    assert!(worst <= 1.5, "worst ratio {worst}");
}

#[test]
fn disjoint_lifetimes_share_one_buffer() {
    let reqs: Vec<Lifetime> = (0..5).map(|i| Lifetime { size: 10 + i, start: i, end: i }).collect();
    let (offs, arena) = plan_lifetimes(&reqs);
    assert_eq!(arena, 14);
    assert!(offs.iter().all(|&o| o == 0));
}

#[test]
fn compiled_model_survives_reload() {
    let f = toy();
    let b = build(&f, Policy::W8A16);
    let s = Session::load(&b.model).unwrap();
    assert_eq!(s.model(), &CompiledModel::load(&b.model).unwrap());
    assert_eq!(s.plans().len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_dag_plans_are_valid(seed in any::<u64>()) {
        check_plan(&random_dag(seed, 14), seed ^ 1);
    }

    #[test]
    fn lifetime_plans_never_collide(seed in any::<u64>(), n in 1usize..40) {
        let mut r = Prng::new(seed);
        let reqs = random_lifetimes(&mut r, n, 30);
        let (offs, arena) = plan_lifetimes(&reqs);
        prop_assert_eq!(occupancy_conflict(&reqs, &offs, arena), None);
        let peak = (0..30)
            .map(|s| reqs.iter().filter(|l| l.start <= s && s <= l.end).map(|l| l.size).sum::<usize>())
            .max()
            .unwrap();
        prop_assert!(arena >= peak);
    }
}
