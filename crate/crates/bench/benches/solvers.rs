use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use popctrl_bench::{reference_data, reference_system};
use popctrl_core::{
    minimize_penalty, solve_adjoint, solve_forward, AdjointMode, ControlMode, ControlPair, Coupling,
    FrozenProblem, PenaltyProblem,
};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for k in [64.0, 128.0] {
        let sys = reference_system(1.0 / k);
        let data = reference_data(&sys);
        let zero = ControlPair::zeros(&sys.grid);
        group.bench_with_input(BenchmarkId::new("nonlinear", k), &sys, |b, sys| {
            b.iter(|| solve_forward(sys, &zero, &data, &data, Coupling::Nonlinear).unwrap())
        });
    }
    group.finish();
}

fn adjoint(c: &mut Criterion) {
    let sys = reference_system(1.0 / 64.0);
    let data = reference_data(&sys);
    let p = vec![1.0; sys.grid.time_nodes()];
    c.bench_function("adjoint/coupled/64", |b| {
        b.iter(|| solve_adjoint(&sys, &data, &data, &p, AdjointMode::Coupled).unwrap())
    });
}

fn penalty(c: &mut Criterion) {
    let sys = reference_system(1.0 / 64.0);
    let data = reference_data(&sys);
    let p = vec![1.0; sys.grid.time_nodes()];
    let fp = FrozenProblem::new(&sys, &p, &data, &data);
    let problem = PenaltyProblem::new(1e-3, 1e-3, 1e-3, ControlMode::Both);
    let mut group = c.benchmark_group("cg");
    group.sample_size(10);
    group.bench_function("penalty/1e-3/64", |b| b.iter(|| minimize_penalty(&problem, &fp).unwrap()));
    group.finish();
}

criterion_group!(benches, forward, adjoint, penalty);
criterion_main!(benches);
