use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use surrogate_core::power::{solve_sample_size, solve_sample_size_ci, EffectSizeDraws};
use surrogate_core::resample::CvEstimator;
use surrogate_core::simulate::generate;
use surrogate_core::transform::fit_transform;
use surrogate_core::{AnalysisConfig, CvPlan, PerturbationScheme, SimulationSetting, TransformFitter};

fn data(n: usize) -> surrogate_core::TrialDataset {
    generate(&SimulationSetting::benchmark(1, None).unwrap(), n, 1).unwrap()
}

fn curves(c: &mut Criterion) {
    let d = data(2000);
    let cfg = AnalysisConfig::default();
    let fitter = TransformFitter::new(&d, &cfg).unwrap();
    let w = PerturbationScheme::new(1, 2).weights(0, d.len());
    c.bench_function("kernel curves, n = 2000, 512 nodes", |b| b.iter(|| fitter.curves(black_box(Some(&w))).unwrap()));
    c.bench_function("fit_transform, n = 2000", |b| b.iter(|| fit_transform(black_box(&d), &cfg).unwrap()));
}

fn resample(c: &mut Criterion) {
    let d = data(2000);
    let cfg = AnalysisConfig::default();
    let est = CvEstimator::new(&d, &CvPlan::new(&d, 2, 3), &cfg, &[50, 100, 150]).unwrap();
    let scheme = PerturbationScheme::new(1000, 4);
    let mut b_idx = 0;
    c.bench_function("CV perturbation replicate, n = 2000, K = 2", |b| {
        b.iter_batched(
            || {
                b_idx += 1;
                scheme.weights(b_idx, d.len())
            },
            |w| est.evaluate(Some(&w)).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn design(c: &mut Criterion) {
    c.bench_function("solve_sample_size", |b| {
        b.iter(|| solve_sample_size(black_box(0.3), black_box(0.2), 100, 1.0, 1.96).unwrap())
    });
    let draws = EffectSizeDraws {
        point: vec![(0.2, 0.3), (0.21, 0.29)],
        replicates: (0..500)
            .map(|i| {
                let e = 0.01 * ((i % 17) as f64 - 8.0) / 8.0;
                vec![(0.2 + e, 0.3 - e), (0.21 - e, 0.29 + e)]
            })
            .collect(),
    };
    c.bench_function("solve_sample_size_ci, B = 500", |b| {
        b.iter(|| solve_sample_size_ci(black_box(&draws), 100, 1.0, 0.05, 1.96, 1_000_000).unwrap())
    });
}

criterion_group!(benches, curves, resample, design);
criterion_main!(benches);
