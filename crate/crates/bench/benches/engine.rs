use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tig_bench::{batch, model, stream};
use tig_core::restarter::RestartQuery;
use tig_core::{average_precision, RestarterKind, Split, TrainConfig, Trainer};

fn config(restarter: RestarterKind) -> TrainConfig {
    TrainConfig { memory_dim: Some(32), restarter, ..TrainConfig::default() }
}

fn train_batch(c: &mut Criterion) {
    let g = stream(4000);
    let mut group = c.benchmark_group("train_batch");
    group.sample_size(10);
    for kind in [RestarterKind::None, RestarterKind::Static, RestarterKind::Transformer] {
        let m = model(&g, &config(kind));
        let b = batch(&g, 2000, 200);
        // Memory warmed up on the events before the batch, so replay records exist.
        let mut warm = m.new_memory(&g);
        for end in (200..=1800).step_by(200) {
            m.score_batch(&mut warm, &g, &batch(&g, end, 200)).unwrap();
        }
        group.bench_function(BenchmarkId::from_parameter(format!("{kind:?}")), |bench| {
            bench.iter_batched(
                || (warm.clone(), ChaCha8Rng::seed_from_u64(0)),
                |(mut mem, mut rng)| m.train_batch(&mut mem, &g, &b, &mut rng).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn restarter_estimate(c: &mut Criterion) {
    let mut group = c.benchmark_group("restarter_estimate");
    group.sample_size(10);
    for history in [10, 40] {
        let g = stream(4000);
        let m = model(&g, &TrainConfig { history, ..config(RestarterKind::Transformer) });
        let queries: Vec<RestartQuery> = g.events()[3000..3100]
            .iter()
            .map(|e| RestartQuery { node: e.src, counterpart: e.dst, event_idx: e.idx, t: e.t, available: 0..e.idx })
            .collect();
        let r = m.restarter.as_ref().unwrap();
        group.bench_function(BenchmarkId::new("100_queries", history), |bench| {
            bench.iter(|| r.estimate_values(&m.store, &g, &queries).unwrap())
        });
    }
    group.finish();
}

fn parallel_epoch(c: &mut Criterion) {
    let g = stream(2000);
    let cfg = config(RestarterKind::Static);
    let train = g.split_range(Split::Train);
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for workers in [1, 4] {
        group.bench_function(BenchmarkId::new("workers", workers), |bench| {
            bench.iter_batched(
                || Trainer::new(model(&g, &cfg), &g),
                |mut t| t.train_parallel(&g, train.clone(), workers).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<f64> = (0..100_000).map(|_| rand::Rng::random(&mut rng)).collect();
    let labels: Vec<bool> = (0..100_000).map(|i| i % 2 == 0).collect();
    c.bench_function("average_precision_100k", |bench| bench.iter(|| average_precision(&scores, &labels).unwrap()));
}

criterion_group!(benches, train_batch, restarter_estimate, parallel_epoch, metrics);
criterion_main!(benches);
