use criterion::{criterion_group, criterion_main, Criterion};
use mfg_bench::{adaptive, crowd_problem, grid};
use mfg_core::hj::shifted_terminal;
use mfg_core::transport::transport_interval;
use mfg_core::*;
use std::hint::black_box;

fn hj(c: &mut Criterion) {
    let g = grid();
    let h = QuadraticHamiltonian::kinetic();
    let terminal = GridFunction::from_fn(g, f64::abs);
    c.bench_function("interval_hj_hopf_lax", |b| b.iter(|| solve_interval_hj(black_box(&terminal), &h, 0.0, 0.0, 1.0, 40).unwrap()));

    let tree = build_tree(1.0, 8, 2, 0.2, false).unwrap();
    let terminal = shifted_terminal(&tree, &g, |x| 0.5 * (1.3 * x).cos());
    c.bench_function("bshj_binomial_8_steps", |b| b.iter(|| solve_bshj(&tree, &h, black_box(&terminal)).unwrap()));
}

fn transport(c: &mut Criterion) {
    let g = grid();
    let m = DensityField::gaussian(g, 0.0, 0.5).unwrap();
    let drift = DriftField::from_fn(g, 1.0, 10, |x| (x).sin());
    c.bench_function("transport_interval", |b| b.iter(|| transport_interval(black_box(&m.values), &drift, 1.0).unwrap()));
}

fn mfg(c: &mut Criterion) {
    let p = crowd_problem(0.5);
    let tree = build_tree(1.0, 4, 2, 0.1, true).unwrap();
    let cfg = adaptive();
    let mut group = c.benchmark_group("mfg");
    group.sample_size(10);
    group.bench_function("stochastic_recombining_4_steps", |b| b.iter(|| solve_stochastic_mfg(&tree, black_box(&p), &cfg).unwrap()));
    let sol = solve_stochastic_mfg(&tree, &p, &cfg).unwrap();
    let game = GameConfig { n_players: 16, euler_dt: 0.02, n_mc: 100, seed: 1 };
    let family = Deviation::standard_family();
    group.bench_function("nash_gap_16_players", |b| b.iter(|| nash_gap(&game, &p, black_box(&sol), &family).unwrap()));
    group.finish();
}

criterion_group!(benches, hj, transport, mfg);
criterion_main!(benches);
