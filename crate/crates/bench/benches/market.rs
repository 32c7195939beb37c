use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use scmarket_core::dynamics::{integrate, IntegrationOptions};
use scmarket_core::equilibrium::{solve_kkt_closed_form, tatonnement};
use scmarket_core::generate::{random_scenario, RandomScenarioConfig};
use scmarket_core::presets::s1_single;
use scmarket_core::stability::{analyze, AnalysisOptions};
use scmarket_core::welfare::{compare, WelfareOptions};
use scmarket_core::{DynamicState, SolverOptions};

fn equilibrium(c: &mut Criterion) {
    let s = random_scenario(7, &RandomScenarioConfig { scs: (5, 5), customers_per_sc: (3, 3), ..Default::default() });
    c.bench_function("closed_form_5sc", |b| b.iter(|| solve_kkt_closed_form(black_box(&s)).unwrap()));
    let single = s1_single();
    c.bench_function("tatonnement_s1_single", |b| {
        b.iter(|| tatonnement(black_box(&single), &SolverOptions::default()).unwrap())
    });
}

fn dynamics(c: &mut Criterion) {
    let s = s1_single();
    let eq = solve_kkt_closed_form(&s).unwrap().state;
    let x0 = DynamicState::without_capacity(eq);
    let opts = IntegrationOptions {
        t_end: 10.0,
        dt: 1e-3,
        stop_on_convergence: false,
        record_every: 100,
        ..Default::default()
    };
    c.bench_function("rk4_10k_steps", |b| b.iter(|| integrate(black_box(&s), &x0, &opts, None).unwrap()));
}

fn stability(c: &mut Criterion) {
    let s = random_scenario(3, &RandomScenarioConfig { scs: (5, 5), customers_per_sc: (3, 3), ..Default::default() });
    let single = s1_single();
    c.bench_function("analyze_5sc", |b| b.iter(|| analyze(black_box(&s), None, &AnalysisOptions::default()).unwrap()));
    c.bench_function("analyze_lyapunov_s1_single", |b| {
        b.iter(|| analyze(black_box(&single), None, &AnalysisOptions::default()).unwrap())
    });
}

fn welfare(c: &mut Criterion) {
    let s = random_scenario(5, &RandomScenarioConfig { scs: (2, 2), customers_per_sc: (3, 3), ..Default::default() });
    c.bench_function("welfare_compare_2sc", |b| b.iter(|| compare(black_box(&s), &WelfareOptions::default()).unwrap()));
}

criterion_group!(benches, equilibrium, dynamics, stability, welfare);
criterion_main!(benches);
