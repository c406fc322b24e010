use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use catt::config::RunConfig;
use catt::datagen::{self, Split};
use catt::model::{evaluate, CattModel, Mode};
use catt::oracle::{random_scm, DomainSizes};
use catt::par::{self, Execution};

fn executions() -> Vec<(&'static str, Execution)> {
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).max(2);
    vec![
        ("sequential", Execution::sequential()),
        ("parallel", Execution::with_threads(threads)),
    ]
}

fn scm_sweep(c: &mut Criterion) {
    let sizes = DomainSizes { c: 5, x: 5, z: 5, y: 5 };
    let seeds: Vec<u64> = (0..256).collect();
    let mut group = c.benchmark_group("scm_sweep");
    for (name, exec) in executions() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::map_collect(exec, &seeds, |&s| {
                    let scm = random_scm(sizes, s, 1e-3).unwrap();
                    let fd = scm.front_door(0).unwrap();
                    fd.max_abs_diff(&scm.intervene_truth(0).unwrap())
                })
            })
        });
    }
    group.finish();
}

fn model_passes(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let model = CattModel::new(cfg.model.clone(), Mode::Catt, 0).unwrap();
    let data = datagen::generate(&cfg.data.spec, 128, Split::Test, 1).unwrap();

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in executions() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, black_box(&data), exec).unwrap())
        });
    }
    group.finish();

    let batch = &data[..32];
    let mut group = c.benchmark_group("loss_and_grads");
    group.sample_size(10);
    for (name, exec) in executions() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.loss_and_grads(black_box(batch), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, scm_sweep, model_passes);
criterion_main!(benches);
