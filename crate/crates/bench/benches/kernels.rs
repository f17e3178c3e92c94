use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qudit_bench::{normal_samples, random_control, readout_points};
use qudit_core::classify::train_gmm;
use qudit_core::controlopt::{gauss_rule_from_samples, DEFAULT_N_STEPS};
use qudit_core::dynamics::propagate_constant;
use qudit_core::linalg::{expm, C64};
use qudit_core::qmodel::hz;
use qudit_core::validate::{
    build_process_basis, fit_chi, swap02_unitary, FitChiConfig, ProcessMatrix, RepetitionData,
};
use qudit_core::{ControlProblem, DensityMatrix, DeviceParams, LindbladModel, Parity};

fn lindblad(c: &mut Criterion) {
    let params = DeviceParams::reference();
    let model = LindbladModel::new(&params, Parity::Plus).unwrap();
    let s = model.generator(params.omega01, C64::new(hz(5e6), 0.0));
    let rho = DensityMatrix::basis(params.n_levels, 0);
    let mut g = c.benchmark_group("lindblad");
    g.bench_function("generator", |b| {
        b.iter(|| model.generator(black_box(params.omega01), C64::new(hz(5e6), 0.0)))
    });
    g.bench_function("expm_16x16", |b| b.iter(|| expm(black_box(&s.matrix))));
    g.bench_function("propagate_100us", |b| {
        b.iter(|| propagate_constant(&s, black_box(&rho), 100e-6).unwrap())
    });
    g.finish();
}

fn control(c: &mut Criterion) {
    let params = DeviceParams::reference();
    let mut g = c.benchmark_group("control");
    g.sample_size(20);
    for n_steps in [1024, DEFAULT_N_STEPS] {
        let problem = ControlProblem::swap02(&params, 256e-9, n_steps).unwrap();
        let alpha = random_control(&problem, hz(3e6), 1);
        g.bench_function(format!("objective_{n_steps}"), |b| {
            b.iter(|| problem.evaluate(&params, black_box(&alpha)).unwrap())
        });
        g.bench_function(format!("objective_and_gradient_{n_steps}"), |b| {
            b.iter(|| problem.evaluate_with_gradient(&params, black_box(&alpha)).unwrap())
        });
    }
    g.finish();
}

fn statistics(c: &mut Criterion) {
    let samples = normal_samples(hz(3.448e9), hz(2e3), 4000, 2);
    let points = readout_points(2000, 3);
    let all: Vec<_> = points.concat();
    let anchors: Vec<_> = points.iter().map(|s| s[0]).collect();
    let mut g = c.benchmark_group("statistics");
    g.bench_function("gauss_rule_4000x16", |b| {
        b.iter(|| gauss_rule_from_samples(black_box(&samples), 16).unwrap())
    });
    g.bench_function("gmm_3x2000", |b| {
        b.iter(|| train_gmm(black_box(&all), 3, &anchors).unwrap())
    });
    g.finish();
}

fn tomography(c: &mut Criterion) {
    let basis = build_process_basis();
    let target = ProcessMatrix::from_unitary(&swap02_unitary(), &basis).unwrap();
    let data = RepetitionData::from_process(&target.chi(), &basis, 50);
    let mut g = c.benchmark_group("tomography");
    g.sample_size(10);
    g.bench_function("fit_chi_noiseless_swap02", |b| {
        b.iter(|| fit_chi(black_box(&data), &basis, &target, &FitChiConfig::default()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, lindblad, control, statistics, tomography);
criterion_main!(benches);
