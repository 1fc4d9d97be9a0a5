use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfjump::exec::Exec;
use mfjump::lqoracle::LqSpec;
use mfjump::measure::EmpiricalMeasure;
use mfjump::solver::{solve_mftc, SolveConfig};

fn exec_modes(c: &mut Criterion) {
    let spec = LqSpec::fixture_with_jump();
    let model = spec.model().unwrap();
    let jm = spec.jump_measure().unwrap();
    let mut group = c.benchmark_group("solve_lq_fixture");
    group.sample_size(10);
    for particles in [1_000, 4_000] {
        let mu = EmpiricalMeasure::sample_gaussian(particles, &[0.5], &[0.4], 5).unwrap();
        for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            let cfg = SolveConfig { steps: 50, tol_control: 1e-7, seed: 11, exec, ..Default::default() };
            group.bench_with_input(BenchmarkId::new(name, particles), &mu, |b, mu| {
                b.iter(|| solve_mftc(&model, &jm, mu, &cfg).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, exec_modes);
criterion_main!(benches);
