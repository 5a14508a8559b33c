use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sinkrank::attention::{san_forward_with, NetConfig, Toggles};
use sinkrank::randomprod::{random_product_experiment_with, RandomProductConfig, Replacement};
use sinkrank::residual::sample_paths_with;
use sinkrank::{rng, Exec, Mat, NormalizerKind};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn forward(c: &mut Criterion) {
    let cfg = NetConfig::new(6, 2, 16, 32, 64, NormalizerKind::Sinkhorn, Toggles::FULL).unwrap();
    let mut r = rng::seeded(1);
    let net = cfg.random_layers(&mut r, cfg.default_init_std());
    let batch: Vec<Mat> = (0..32).map(|_| rng::gaussian(&mut r, 16, 32, 1.0)).collect();
    let mut g = c.benchmark_group("san_forward");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| san_forward_with(exec, black_box(&batch), &net, &cfg).unwrap())
        });
    }
    g.finish();

    let store = san_forward_with(Exec::Parallel, &batch, &net, &cfg).unwrap();
    let mut g = c.benchmark_group("sample_paths");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sample_paths_with(exec, black_box(&store), 6, 100, 3).unwrap())
        });
    }
    g.finish();
}

fn random_products(c: &mut Criterion) {
    let cfg = RandomProductConfig {
        max_depth: 8,
        samples: 20,
        ..RandomProductConfig::new(NormalizerKind::Sinkhorn, false, 5)
    };
    let mut g = c.benchmark_group("random_products");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| random_product_experiment_with(exec, black_box(&cfg), Replacement::Half).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forward, random_products);
criterion_main!(benches);
