use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tdsplit_core::bellman::{t_lambda_apply, TLambdaMode};
use tdsplit_core::mdp::{random_ergodic_chain, GarnetSpec};
use tdsplit_core::{
    mixing_time, reference_chain, run_experiment, splitting_certificate_td0, splitting_certificate_td_lambda,
    td0_fixed_point, Algo, FeatureMap, InducedChain, ProjectionSpec, RunSpec,
};

fn garnet(n: usize, gamma: f64) -> InducedChain {
    let spec = GarnetSpec {
        n_states: n,
        n_actions: 3,
        branching: 4.min(n),
        gamma,
    };
    random_ergodic_chain(&spec, 7, 50).unwrap()
}

fn chain_construction(c: &mut Criterion) {
    let mut group = c.benchmark_group("chain");
    for n in [8, 32, 128] {
        group.bench_with_input(BenchmarkId::new("garnet_stationary", n), &n, |b, &n| {
            b.iter(|| garnet(black_box(n), 0.9))
        });
    }
    let chain = garnet(32, 0.9);
    group.bench_function("mixing_time_32", |b| {
        b.iter(|| mixing_time(black_box(&chain), 0.01).unwrap())
    });
    group.finish();
}

fn certificates(c: &mut Criterion) {
    let chain = garnet(8, 0.99);
    let features = FeatureMap::random_unit_rows(8, 4, 3).unwrap();
    let mut group = c.benchmark_group("certificate");
    group.bench_function("td0", |b| {
        b.iter(|| splitting_certificate_td0(&chain, black_box(&features)).unwrap())
    });
    for lambda in [0.5, 0.9] {
        group.bench_with_input(BenchmarkId::new("td_lambda", lambda), &lambda, |b, &lambda| {
            b.iter(|| splitting_certificate_td_lambda(&chain, &features, black_box(lambda), None).unwrap())
        });
    }
    let j = chain.reward().clone();
    group.bench_function("t_lambda_closed_form", |b| {
        b.iter(|| t_lambda_apply(&chain, black_box(&j), 0.9, TLambdaMode::ClosedForm).unwrap())
    });
    group.bench_function("t_lambda_truncated_200", |b| {
        b.iter(|| t_lambda_apply(&chain, black_box(&j), 0.9, TLambdaMode::Truncated(200)).unwrap())
    });
    group.finish();
}

fn learner(c: &mut Criterion) {
    let chain = reference_chain(0.5).unwrap();
    let features = FeatureMap::identity(2);
    let star = td0_fixed_point(&chain, &features).unwrap().theta();
    let proj = ProjectionSpec::ball(2.0 * star.norm());
    let mut group = c.benchmark_group("learner");
    group.sample_size(20);
    for algo in [Algo::Td0, Algo::TdLambda { lambda: 0.5 }, Algo::MeanAdjusted] {
        let spec = RunSpec::new(algo, 10_000, vec![0], proj);
        group.bench_function(BenchmarkId::new("one_seed_1e4", algo.name()), |b| {
            b.iter(|| run_experiment(&chain, &features, black_box(&spec)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, chain_construction, certificates, learner);
criterion_main!(benches);
