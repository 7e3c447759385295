use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cellflow_core::parallel::Execution;
use cellflow_core::runner::{run_seeds, EvalOptions};
use cellflow_core::scenarios::gen_grid;
use cellflow_core::ControllerKind;

fn seed_sweep(c: &mut Criterion) {
    let def = gen_grid(4, 4);
    let opts = EvalOptions { seconds: 600, ..EvalOptions::new(ControllerKind::MaxPressure).mesoscopic(true) };
    let seeds: Vec<u64> = (0..16).collect();
    let mut group = c.benchmark_group("seed_sweep_grid4x4_16x600");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}").to_lowercase()), &exec, |b, &exec| {
            b.iter(|| run_seeds(&def, &opts, &seeds, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, seed_sweep);
criterion_main!(benches);
