use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use recess_core::par;
use recess_core::tasks::{generate_synthetic, local_train, partition, Arch, ModelParams, PartitionSpec, TrainArgs};

fn local_round(c: &mut Criterion) {
    let data = generate_synthetic(10, 100, 600, 7).unwrap();
    let params = ModelParams::init(Arch::mlp(100, 32, 10), 7).unwrap();
    let args = TrainArgs {
        epochs: 1,
        batch_size: 16,
        lr: 0.05,
        max_steps: None,
    };
    let mut group = c.benchmark_group("local_train");
    group.sample_size(10);
    for clients in [10usize, 50] {
        let shards = partition(&data, &PartitionSpec::iid(clients, 10, 7)).unwrap();
        group.bench_with_input(BenchmarkId::new("sequential", clients), &shards, |b, s| {
            b.iter(|| par::map_sequential(s, |i, d| local_train(&params, d, &args, i as u64).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("parallel", clients), &shards, |b, s| {
            b.iter(|| par::map(s, |i, d| local_train(&params, d, &args, i as u64).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, local_round);
criterion_main!(benches);
