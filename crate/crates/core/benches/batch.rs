use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use quad_core::distill::{quad_align_all, DistillConfig};
use quad_core::graph::{LoRAAdapter, ModelBundle, Sample};
use quad_core::model_def::ModelDef;
use quad_core::par::Exec;
use quad_core::quant::{calibrate, Policy};
use quad_core::sensitivity::build_shared_profile;

const DEF: &str = "\
tokens 32
input 32
cond 16
latent 32
steps 3
seed 5
noise 1.0
encoder linear 96 silu
encoder linear 32
backbone lora 96 rank=8 silu
backbone lora 32 rank=8 residual
decoder linear 96 silu
decoder linear 32
adapter a seed=1 scale=0.1
adapter b seed=2 scale=0.1
adapter c seed=3 scale=0.1
adapter d seed=4 scale=0.1
";

struct Setup {
    bundle: ModelBundle,
    adapters: Vec<LoRAAdapter>,
    data: Vec<Sample>,
}

fn setup() -> Setup {
    let def = ModelDef::parse(DEF).unwrap();
    let bundle = def.build_bundle().unwrap();
    let adapters = def.build_adapters(&bundle).unwrap();
    Setup { data: def.samples(16, 9), bundle, adapters }
}

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench_calibrate(c: &mut Criterion) {
    let s = setup();
    let mut g = c.benchmark_group("calibrate");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(calibrate(&s.bundle, Some(&s.adapters[0]), &s.data, exec).unwrap()))
        });
    }
    g.finish();
}

fn bench_qss(c: &mut Criterion) {
    let s = setup();
    let mut g = c.benchmark_group("shared_profile");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(build_shared_profile(&s.bundle, &s.adapters, &s.data[..4], Policy::W8A16, 8, 0.05, exec).unwrap()))
        });
    }
    g.finish();
}

fn bench_align(c: &mut Criterion) {
    let s = setup();
    let shared = build_shared_profile(&s.bundle, &s.adapters, &s.data[..4], Policy::W8A16, 8, 0.05, Exec::Parallel).unwrap().0;
    let datasets = vec![s.data[..4].to_vec(); s.adapters.len()];
    let cfg = DistillConfig { steps: 5, learning_rate: 1e-2, lambda_task: 0.0, batch: 2, seed: 0 };
    let mut g = c.benchmark_group("align_all");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(quad_align_all(&s.bundle, &s.adapters, &shared, &datasets, &cfg, None, exec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_calibrate, bench_qss, bench_align);
criterion_main!(benches);
