use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mono_gp::experiments::{example1_data, example1_predictions, example1_spec};
use mono_gp::scmc::{mcmc_init, move_particles, InitConfig, MoveConfig};
use mono_gp::{Execution, Hyperparameters, Model, Priors};

fn bench_moves(c: &mut Criterion) {
    let (pts, _) = example1_predictions();
    let model = Model::new(
        example1_data(),
        pts,
        example1_spec(10),
        Hyperparameters::Sampled(Priors::default()),
    )
    .unwrap();
    let init = InitConfig {
        burnin: 500,
        thin: 1,
        ..InitConfig::default()
    };
    let mut group = c.benchmark_group("move_particles");
    group.sample_size(10);
    for n in [256usize, 1024] {
        let (ens, _) = mcmc_init(&model, n, &init, 1, Execution::Parallel).unwrap();
        let cfg = MoveConfig::from_ensemble(&ens, model.latent_len());
        for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter_batched(
                    || ens.clone(),
                    |mut e| move_particles(&mut e, &model, 1e3, &cfg, 1, exec).unwrap(),
                    criterion::BatchSize::LargeInput,
                )
            });
        }
    }
    group.finish();
}

fn bench_init(c: &mut Criterion) {
    let (pts, _) = example1_predictions();
    let model = Model::new(example1_data(), pts, example1_spec(10), Hyperparameters::Sampled(Priors::default())).unwrap();
    let init = InitConfig {
        burnin: 100,
        thin: 1,
        ..InitConfig::default()
    };
    let mut group = c.benchmark_group("mcmc_init");
    group.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_function(name, |b| b.iter(|| mcmc_init(&model, 1024, &init, 3, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_moves, bench_init);
criterion_main!(benches);
