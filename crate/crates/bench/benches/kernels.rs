use boxadapt_bench::{pattern, samples};
use boxadapt_core::data::Role;
use boxadapt_core::segnet::{Head, NetConfig, SegModel};
use boxadapt_core::train::{train_stage1, train_stage2, TrainConfig};
use boxadapt_core::{Graph, Grid};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn conv(c: &mut Criterion) {
    let x: Grid<f32> = pattern(&[4, 8, 64, 64], 0.0);
    let k: Grid<f32> = pattern(&[16, 8, 3, 3], 1.0);
    let b: Grid<f32> = Grid::zeros(&[16]);

    c.bench_function("conv2d forward 4x8x64x64 -> 16", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.constant(x.clone()).unwrap();
            let k = g.constant(k.clone()).unwrap();
            let b = g.constant(b.clone()).unwrap();
            black_box(g.conv2d(x, k, b, 1, 1).unwrap());
        })
    });
    c.bench_function("conv2d forward+backward 4x8x64x64 -> 16", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf(x.clone(), true).unwrap();
            let k = g.leaf(k.clone(), true).unwrap();
            let b = g.leaf(b.clone(), true).unwrap();
            let y = g.conv2d(x, k, b, 1, 1).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
            black_box(g.grad(k).map(|g| g.len()));
        })
    });
}

fn model(c: &mut Criterion) {
    let model = SegModel::<f32>::build(NetConfig::default(), 0).unwrap();
    let batch: Grid<f32> = pattern(&[4, 1, 64, 64], 0.5);
    c.bench_function("model forward batch 4 at 64x64", |bench| {
        bench.iter(|| black_box(model.predict(Head::Target, &batch).unwrap()))
    });
}

fn train_steps(c: &mut Criterion) {
    let source = samples(8, 64, Role::SourceLabeled);
    let weak = samples(8, 64, Role::TargetWeak);
    let unlabeled = samples(8, 64, Role::TargetUnlabeled);
    let cfg = TrainConfig {
        iters_stage1: 1,
        iters_stage2: 1,
        ..TrainConfig::default()
    };
    let fresh = SegModel::<f32>::build(cfg.net.clone(), 0).unwrap();

    c.bench_function("stage I step", |bench| {
        bench.iter(|| {
            let mut model = fresh.clone();
            black_box(train_stage1(&mut model, &source, &weak, &cfg).unwrap());
        })
    });
    c.bench_function("stage II step", |bench| {
        bench.iter(|| {
            let mut model = fresh.clone();
            black_box(train_stage2(&mut model, &unlabeled, &weak, &cfg).unwrap());
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, model, train_steps
}
criterion_main!(benches);
