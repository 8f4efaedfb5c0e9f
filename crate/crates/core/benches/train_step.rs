use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hydramamba::model::{sample_gradients, Model, ModelConfig, ToyTask};
use hydramamba::par;

const BACKEND: &str = if cfg!(feature = "parallel") {
    "rayon"
} else {
    "sequential-fallback"
};

/// Gradients for a batch of eight clouds, fanned out over the pool.
fn batch(model: &Model, clouds: &[hydramamba::pointio::PointCloud]) -> f64 {
    par::map_range(clouds.len(), |i| {
        sample_gradients(model, &clouds[i], i as u64).unwrap().loss
    })
    .into_iter()
    .sum()
}

fn train_step(c: &mut Criterion) {
    let task = ToyTask {
        n_points: 256,
        train_per_class: 2,
        test_per_class: 1,
        ..ToyTask::default()
    };
    let (train, _) = task.split().unwrap();
    let mut group = c.benchmark_group(format!("train_step/{BACKEND}"));
    group.sample_size(10);
    for (name, cfg) in [("tiny", ModelConfig::tiny()), ("toy", ModelConfig::toy())] {
        let model = Model::new(cfg, 0).unwrap();
        group.bench_function(BenchmarkId::new("predict", name), |b| {
            b.iter(|| model.predict(black_box(&train[0])).unwrap())
        });
        for threads in [1, 2, 4] {
            group.bench_function(BenchmarkId::new(format!("batch8/t{threads}"), name), |b| {
                par::with_threads(threads, || b.iter(|| batch(&model, black_box(&train))))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
