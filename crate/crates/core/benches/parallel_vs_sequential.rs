use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fastclip_core::config::RunConfig;
use fastclip_core::data::{generate_dataset, SyntheticSpec};
use fastclip_core::encoder::{Arch, TowerSpec, TwoTower};
use fastclip_core::loss::eval_gcl_with;
use fastclip_core::par::Exec;
use fastclip_core::trainer::{Trainer, Variant};

const MODES: [(&str, Exec); 2] = [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)];

fn exact_loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("eval_gcl");
    for n in [256, 1024] {
        let data = generate_dataset(&SyntheticSpec {
            n,
            probe: 0,
            ..Default::default()
        })
        .unwrap();
        let spec = TowerSpec {
            d_in: 16,
            d_out: 16,
            arch: Arch::Linear,
        };
        let model = TwoTower::init(spec, spec, 0).unwrap();
        let (e1, _) = model.image.forward(data.x.view()).unwrap();
        let (e2, _) = model.text.forward(data.t.view()).unwrap();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &exec, |b, &exec| {
                b.iter(|| eval_gcl_with(black_box(e1.view()), black_box(e2.view()), 0.03, 1e-14, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn training_epoch(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for workers in [4, 8] {
        for (name, exec) in MODES {
            let mut cfg = RunConfig::default();
            cfg.algo.variant = Variant::FastclipV3;
            cfg.data.n = 512;
            cfg.fabric.workers = workers;
            cfg.fabric.batch = 64 / workers;
            cfg.fabric.exec = exec;
            let data = generate_dataset(&cfg.data.spec()).unwrap();
            group.bench_with_input(BenchmarkId::new(name, workers), &cfg, |b, cfg| {
                b.iter_batched(
                    || Trainer::new(cfg.clone(), data.clone()).unwrap(),
                    |mut tr| tr.run_epoch().unwrap(),
                    criterion::BatchSize::LargeInput,
                )
            });
        }
    }
    group.finish();
}

criterion_group!(benches, exact_loss, training_epoch);
criterion_main!(benches);
