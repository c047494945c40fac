use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use wvtr_bench::{random_history, warmed_agent};
use wvtr_core::uncertainty::{ball_upper_bound, uncertainty_general, BallLinearOracle, UncertaintyProblem};

fn bench_plan(c: &mut Criterion) {
    let mut group = c.benchmark_group("plan");
    for &(n, h) in &[(5, 20), (5, 100), (10, 100)] {
        let agent = warmed_agent(n, h, 20);
        group.bench_with_input(BenchmarkId::from_parameter(format!("S{n}_H{h}")), &agent, |b, agent| {
            b.iter(|| black_box(agent.plan_episode().unwrap()))
        });
    }
    group.finish();
}

fn bench_home(c: &mut Criterion) {
    let agent = warmed_agent(5, 20, 50);
    c.bench_function("home/S5_M3", |b| {
        b.iter(|| black_box(agent.weights_for(black_box(3), 2, 0).unwrap()))
    });
}

fn bench_uncertainty_general(c: &mut Criterion) {
    let mut group = c.benchmark_group("uncertainty_general");
    group.sample_size(20);
    for &(dim, n) in &[(5, 50), (10, 200)] {
        let (history, sigmas) = random_history(dim, n, 0.1, 1);
        let (queries, _) = random_history(dim, 1, 0.1, 2);
        let problem = UncertaintyProblem {
            history: &history,
            sigmas: &sigmas,
            lambda: 1.0,
            upper_bound: ball_upper_bound(&history, &sigmas, 1.0, 1.0),
            precision: 1e-4,
        };
        group.bench_function(BenchmarkId::from_parameter(format!("d{dim}_n{n}")), |b| {
            b.iter(|| {
                let mut oracle = BallLinearOracle::default();
                black_box(uncertainty_general(&problem, &queries[0], &mut oracle).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_plan, bench_home, bench_uncertainty_general);
criterion_main!(benches);
