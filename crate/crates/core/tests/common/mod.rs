#![allow(dead_code)]

use quad_core::graph::{run, ExecCtx, Graph, GraphBuilder, LoRAAdapter, ModelBundle, Op, Sample, TensorId, Value};
use quad_core::model_def::{ModelDef, TOY};
use quad_core::distill::{loss_and_grads, student_loss};
use quad_core::graph::Mode;
use quad_core::quant::QuantSim;
use quad_core::rng::Prng;
use quad_core::runtime::{plan_memory, Lifetime};
use std::collections::HashMap;
use quad_core::tensor::{ActKind, Tensor};

/// The toy model with 256 tokens and a third adapter whose first rank
/// component is scaled up, widening the range its factors span.
pub const FRAGILE: &str = "\
tokens 256
input 8
cond 4
latent 8
steps 2
seed 7
noise 1.0
encoder linear 16 silu
encoder linear 8
backbone lora 16 rank=4 silu
backbone lora 8 rank=4 residual
decoder linear 16 silu
decoder linear 8
adapter style-a seed=11 scale=0.2
adapter style-b seed=12 scale=0.2
adapter fragile seed=13 scale=0.2 outlier=20
";

/// Two adapters drawn from the same seed: identical factors under
/// different ids.
pub const SYMMETRIC: &str = "\
tokens 16
input 8
cond 4
latent 8
steps 2
seed 7
noise 1.0
encoder linear 16 silu
encoder linear 8
backbone lora 16 rank=4 silu
backbone lora 8 rank=4 residual
decoder linear 16 silu
decoder linear 8
adapter twin-a seed=21 scale=0.2
adapter twin-b seed=21 scale=0.2
";

/// Wider layers; the biggest weight image among the fixtures.
pub const LARGE: &str = "\
tokens 32
input 32
cond 16
latent 32
steps 3
seed 5
noise 1.0
encoder linear 128 silu
encoder linear 32
backbone lora 128 rank=8 silu
backbone lora 128 rank=8 relu
backbone lora 32 rank=8 residual
decoder linear 128 silu
decoder linear 32
adapter style-a seed=31 scale=0.1
adapter style-b seed=32 scale=0.1 rank=4
";

pub struct Fixture {
    pub name: &'static str,
    pub def: ModelDef,
    pub bundle: ModelBundle,
    pub adapters: Vec<LoRAAdapter>,
}

pub fn fixture(name: &'static str, text: &str) -> Fixture {
    let def = ModelDef::parse(text).expect("fixture parses");
    let bundle = def.build_bundle().expect("fixture builds");
    let adapters = def.build_adapters(&bundle).expect("fixture adapters");
    Fixture { name, def, bundle, adapters }
}

pub fn toy() -> Fixture {
    fixture("toy", TOY)
}

pub fn all_fixtures() -> Vec<Fixture> {
    vec![toy(), fixture("fragile", FRAGILE), fixture("symmetric", SYMMETRIC), fixture("large", LARGE)]
}

impl Fixture {
    pub fn samples(&self, n: usize, seed: u64) -> Vec<Sample> {
        self.def.samples(n, seed)
    }
}

/// A random small definition: widths, token count, ranks, activations and
/// adapter ranks all drawn from `seed`.
pub fn random_def_text(seed: u64) -> String {
    let mut r = Prng::new(seed);
    let mut pick = |lo: usize, hi: usize| lo + r.below(hi - lo + 1);
    let latent = pick(4, 8);
    let acts = ["", " relu", " silu"];
    let mut s = format!(
        "tokens {}\ninput {}\ncond {}\nlatent {latent}\nsteps {}\nseed {}\nnoise 0.5\n",
        pick(1, 6),
        pick(2, 8),
        pick(1, 4),
        pick(1, 2),
        pick(0, 1000)
    );
    s += &format!("encoder linear {}{}\nencoder linear {latent}\n", pick(2, 10), acts[pick(0, 2)]);
    for _ in 0..pick(0, 1) {
        s += &format!("backbone lora {} rank={}{}\n", pick(4, 10), pick(1, 4), acts[pick(0, 2)]);
    }
    s += &format!("backbone lora {latent} rank={}{}\n", pick(1, 4), if pick(0, 1) == 1 { " residual" } else { "" });
    s += &format!("decoder linear {}\n", pick(2, 8));
    for i in 0..pick(1, 3) {
        let rank = if pick(0, 1) == 1 { format!(" rank={}", pick(1, 2)) } else { String::new() };
        s += &format!("adapter ad{i} seed={} scale=0.{}{rank} alpha={}\n", pick(0, 9999), pick(1, 5), pick(1, 3));
    }
    s
}

pub fn random_fixture(seed: u64) -> Fixture {
    fixture("random", &random_def_text(seed))
}

/// Pads `t` (`[rows, r]` or `[r, cols]`) with zeros to `rows × r_max` along
/// the rank axis.
pub fn pad_rank(t: &Tensor, r_max: usize, rank_is_cols: bool) -> Tensor {
    let (rows, cols) = t.dims2().unwrap();
    let v = t.as_f32().unwrap();
    if rank_is_cols {
        let mut out = vec![0.0; rows * r_max];
        for i in 0..rows {
            out[i * r_max..i * r_max + cols].copy_from_slice(&v[i * cols..(i + 1) * cols]);
        }
        Tensor::from_f32(vec![rows, r_max], out).unwrap()
    } else {
        let mut out = v.to_vec();
        out.resize(r_max * cols, 0.0);
        Tensor::from_f32(vec![r_max, cols], out).unwrap()
    }
}

pub fn rel_err(reference: &Tensor, test: &Tensor) -> f64 {
    let (a, b) = (reference.as_f32().unwrap(), test.as_f32().unwrap());
    assert_eq!(a.len(), b.len());
    let scale = a.iter().fold(0f64, |m, x| m.max(x.abs() as f64)).max(1e-12);
    let diff = a.iter().zip(b).fold(0f64, |m, (x, y)| m.max((*x as f64 - *y as f64).abs()));
    diff / scale
}

/// Random DAG over `[rows × cols]` tensors built from activations, adds,
/// multiplies and row concatenations. The last tensor and a random subset
/// of the others become outputs.
pub fn random_dag(seed: u64, max_nodes: usize) -> Graph {
    let mut r = Prng::new(seed);
    let cols = 1 + r.below(3);
    let mut b = GraphBuilder::new("dag", 0);
    let mut pool: Vec<(TensorId, usize)> = Vec::new();
    for i in 0..1 + r.below(2) {
        let rows = 1 + r.below(4);
        pool.push((b.input(&format!("in{i}"), &[rows, cols]), rows));
    }
    if r.below(2) == 1 {
        let rows = 1 + r.below(4);
        let c = r.normal_tensor(&[rows, cols], 1.0);
        pool.push((b.constant(c), rows));
    }
    let n = 1 + r.below(max_nodes.max(1));
    for _ in 0..n {
        let (x, rx) = pool[r.below(pool.len())];
        let (y, ry) = pool[r.below(pool.len())];
        let t = match r.below(4) {
            0 => (b.act(x, [ActKind::Relu, ActKind::Silu][r.below(2)]), rx),
            1 if rx == ry => (b.add(x, y), rx),
            2 if rx == ry => (b.mul(x, y), rx),
            _ => (b.concat(&[x, y]), rx + ry),
        };
        pool.push(t);
    }
    let last = pool.last().unwrap().0;
    let mut outs = vec![last];
    for &(t, _) in &pool {
        if t != last && r.below(5) == 0 {
            outs.push(t);
        }
    }
    for (i, t) in outs.into_iter().enumerate() {
        b.output(&format!("out{i}"), t);
    }
    b.finish().expect("random dag is valid")
}

/// Smallest arena over every placement order when each buffer goes to the
/// lowest offset clear of the already placed, lifetime-overlapping ones.
/// Some order reproduces any optimal packing's offsets or lower, so this
/// is the exact optimum.
pub fn brute_force_arena(reqs: &[Lifetime]) -> usize {
    fn place(reqs: &[Lifetime], order: &[usize]) -> usize {
        let mut off = vec![0usize; reqs.len()];
        let mut arena = 0;
        for (k, &i) in order.iter().enumerate() {
            let mut busy: Vec<(usize, usize)> = order[..k]
                .iter()
                .filter(|&&j| reqs[j].overlaps(&reqs[i]) && reqs[j].size > 0)
                .map(|&j| (off[j], off[j] + reqs[j].size))
                .collect();
            busy.sort_unstable();
            let mut at = 0;
            for (lo, hi) in busy {
                if at + reqs[i].size <= lo {
                    break;
                }
                at = at.max(hi);
            }
            off[i] = at;
            arena = arena.max(at + reqs[i].size);
        }
        arena
    }
    fn permute(reqs: &[Lifetime], order: &mut Vec<usize>, k: usize, best: &mut usize) {
        if k == order.len() {
            *best = (*best).min(place(reqs, order));
            return;
        }
        for i in k..order.len() {
            order.swap(k, i);
            permute(reqs, order, k + 1, best);
            order.swap(k, i);
        }
    }
    let mut order: Vec<usize> = (0..reqs.len()).collect();
    let mut best = usize::MAX;
    permute(reqs, &mut order, 0, &mut best);
    if reqs.is_empty() {
        0
    } else {
        best
    }
}

/// Checks byte-disjointness of simultaneously live buffers step by step,
/// without using the planner's own overlap test.
pub fn occupancy_conflict(reqs: &[Lifetime], offsets: &[usize], arena: usize) -> Option<(usize, usize)> {
    let steps = reqs.iter().map(|l| l.end + 1).max().unwrap_or(0);
    for s in 0..steps {
        let mut owner: Vec<Option<usize>> = vec![None; arena];
        for (i, l) in reqs.iter().enumerate() {
            if l.start > s || l.end < s {
                continue;
            }
            for b in offsets[i]..offsets[i] + l.size {
                if b >= arena {
                    return Some((i, i));
                }
                if let Some(j) = owner[b] {
                    return Some((j, i));
                }
                owner[b] = Some(i);
            }
        }
    }
    None
}

pub fn random_lifetimes(r: &mut Prng, n: usize, horizon: usize) -> Vec<Lifetime> {
    (0..n)
        .map(|_| {
            let start = r.below(horizon);
            let end = start + r.below(horizon - start);
            Lifetime { size: 1 + r.below(64), start, end }
        })
        .collect()
}

/// Standard-normal feeds for every input of `g`, in input order.
pub fn dag_feeds(g: &Graph, seed: u64) -> Vec<Value> {
    let mut r = Prng::new(seed);
    g.inputs
        .iter()
        .map(|t| {
            let shape = g
                .nodes
                .iter()
                .find_map(|n| match &n.op {
                    Op::Input { shape, .. } if n.output == *t => Some(shape.clone()),
                    _ => None,
                })
                .expect("input node");
            Value::plain(r.normal_tensor(&shape, 1.0))
        })
        .collect()
}

/// Checks a plan against the graph itself: every buffer is born when its
/// producer runs, lives until its last consumer, has the byte size the
/// executor actually produces, and shares no bytes with a live neighbour.
pub fn check_plan(g: &Graph, seed: u64) {
    let plan = plan_memory(g).unwrap();
    let env = run(g, &dag_feeds(g, seed), &ExecCtx::default()).unwrap();
    let last = g.nodes.len() - 1;
    let start: HashMap<_, _> = plan.slots.iter().map(|(t, s)| (*t, s.life.start)).collect();
    for n in &g.nodes {
        if matches!(n.op, Op::Constant) {
            assert!(!plan.slots.contains_key(&n.output));
            continue;
        }
        let slot = &plan.slots[&n.output];
        assert_eq!(slot.size, env[&n.output].tensor.byte_len());
        for u in n.inputs.iter().filter(|u| !g.constants.contains_key(u)) {
            let su = &plan.slots[u];
            assert!(su.life.start < slot.life.start && su.life.end >= slot.life.start);
        }
    }
    let mut starts: Vec<usize> = start.values().copied().collect();
    starts.sort_unstable();
    starts.dedup();
    assert_eq!(starts.len(), plan.slots.len());
    assert!(starts.iter().all(|&s| s <= last));
    for t in &g.outputs {
        assert_eq!(plan.slots[t].life.end, last);
    }
    let reqs: Vec<Lifetime> = plan.slots.values().map(|s| s.life).collect();
    let offs: Vec<usize> = plan.slots.values().map(|s| s.offset).collect();
    assert_eq!(occupancy_conflict(&reqs, &offs, plan.arena_size), None);
    assert!(plan.find_overlap().is_none());
    assert!(plan.arena_size >= plan.peak_live());
}


/// Relative L2 gap between analytic gradients and central differences of
/// the relaxed loss, over every factor element of every entry.
pub fn gradient_gap(sim: &QuantSim, student: &LoRAAdapter, s: &Sample, teacher: &Tensor) -> f64 {
    let (_, grads) = loss_and_grads(sim, student, s, teacher, 0.0, Mode::Relaxed).unwrap();
    let h = 1e-3f32;
    let (mut num, mut den) = (0f64, 0f64);
    for (nid, (ga, gb)) in &grads.entries {
        for (which, g) in [(0, ga), (1, gb)] {
            for (i, &gi) in g.iter().enumerate() {
                let loss_at = |delta: f32| {
                    let mut p = student.clone();
                    let f = p.entries.get_mut(nid).unwrap();
                    let t = if which == 0 { &mut f.a } else { &mut f.b };
                    t.as_f32_mut().unwrap()[i] += delta;
                    student_loss(sim, &p, s, teacher, 0.0, Mode::Relaxed).unwrap().recon
                };
                let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h as f64);
                num += (fd - gi as f64).powi(2);
                den += fd.powi(2);
            }
        }
    }
    (num / den).sqrt()
}

