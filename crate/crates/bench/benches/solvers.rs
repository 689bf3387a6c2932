use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use delq_core::bsde::{assemble_quadratic, oracle_minimize};
use delq_core::instances::{four_step_example, random_problem, WeightKind};
use delq_core::lmei::{certificate_from_riccati, check_membership};
use delq_core::riccati::{classify, solve_riccati, solve_riccati_bar};
use delq_core::simulate::{exact_cost, monte_carlo_cost, NoiseModel};
use delq_core::{Policy, ScenarioTree, Tolerances, Vector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn riccati(c: &mut Criterion) {
    let mut group = c.benchmark_group("riccati");
    let tol = Tolerances::default();
    for &(n, horizon, delay) in &[(2, 4, 2), (4, 20, 5), (8, 50, 10)] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let problem = random_problem(&mut rng, n, n, horizon, delay, WeightKind::Nonnegative);
        let id = format!("n{n}_N{horizon}_d{delay}");
        group.bench_with_input(BenchmarkId::new("piecewise", &id), &problem, |b, p| {
            b.iter(|| solve_riccati(black_box(p), 0).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("unified", &id), &problem, |b, p| {
            b.iter(|| solve_riccati_bar(black_box(p), 0).unwrap())
        });
        let sol = solve_riccati(&problem, 0).unwrap();
        group.bench_with_input(BenchmarkId::new("classify", &id), &sol, |b, s| {
            b.iter(|| classify(black_box(s), &tol).unwrap())
        });
    }
    group.finish();
}

fn lmei(c: &mut Criterion) {
    let problem = four_step_example();
    let tol = Tolerances::default();
    let sol = solve_riccati(&problem, 0).unwrap();
    let (cand, _) = certificate_from_riccati(&problem, &sol, &tol).unwrap();
    c.bench_function("lmei/check_four_step", |b| {
        b.iter(|| check_membership(black_box(&cand), &problem, 0, &tol).unwrap())
    });
}

fn oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("oracle");
    group.sample_size(20);
    let tol = Tolerances::default();
    let problem = four_step_example();
    let x = Vector::from_vec(vec![1.0, 0.0]);
    group.bench_function("assemble_four_step", |b| {
        b.iter(|| assemble_quadratic(black_box(&problem), 0, &x).unwrap())
    });
    let q = assemble_quadratic(&problem, 0, &x).unwrap();
    group.bench_function("minimize_four_step", |b| b.iter(|| oracle_minimize(black_box(&q), &tol).unwrap()));
    group.finish();
}

fn simulation(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    let problem = four_step_example();
    let sol = solve_riccati(&problem, 0).unwrap();
    let policy = Policy::Feedback { gains: sol.k.clone() };
    let x = Vector::from_vec(vec![1.0, 0.0]);
    let tree = ScenarioTree::for_problem(&problem, 0).unwrap();
    group.bench_function("exact_four_step", |b| {
        b.iter(|| exact_cost(black_box(&problem), &x, &policy, &tree).unwrap())
    });
    group.bench_function("monte_carlo_100k", |b| {
        b.iter(|| monte_carlo_cost(black_box(&problem), 0, &x, &policy, NoiseModel::Rademacher, 100_000, 0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, riccati, lmei, oracle, simulation);
criterion_main!(benches);
