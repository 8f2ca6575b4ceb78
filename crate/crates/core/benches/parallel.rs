//! Rayon data-parallel paths against the sequential fallback on the same
//! inputs. With one core the two should be close; the gap shows the
//! scheduling overhead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gevgp::gev::Shape;
use gevgp::laplace::{laplace_logml, outer_optimize, FitOptions, FitResult, InnerOptions};
use gevgp::model::{ModelSpec, SiteDataset};
use gevgp::par;
use gevgp::posterior::{coverage_check, return_levels, sample_joint};
use gevgp::simstudy::{make_lattice, simulate_dataset, true_surfaces, SurfaceSpec};

fn setup() -> (SiteDataset, FitResult) {
    let coords = make_lattice(10, 0.0, 10.0).unwrap();
    let (a, b) = true_surfaces(&SurfaceSpec::default(), &coords).unwrap();
    let data = simulate_dataset(&coords, &a, &b, Shape::Gumbel, 3, 11).unwrap();
    let fit = outer_optimize(&data, ModelSpec::M2, None, &FitOptions::default()).unwrap();
    (data, fit)
}

fn run_both(c: &mut Criterion, name: &str, f: &dyn Fn()) {
    let mut g = c.benchmark_group(name);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("mode", "parallel"), |b| b.iter(f));
    g.bench_function(BenchmarkId::new("mode", "sequential"), |b| b.iter(|| par::sequential(f)));
    g.finish();
}

fn benches(c: &mut Criterion) {
    let (data, fit) = setup();
    let model = fit.model(&data).unwrap();
    let theta = fit.laplace.theta_hat.clone();
    // a slightly displaced start so the inner solver takes a few steps
    let u0: Vec<f64> = fit.laplace.u_hat.iter().map(|v| v - 0.05).collect();

    run_both(c, "laplace_logml", &|| {
        let _ = laplace_logml(&model, &theta, Some(&u0), &InnerOptions::default()).unwrap();
    });
    run_both(c, "return_levels_2000", &|| {
        let draws = sample_joint(&fit, 2000, 1).unwrap();
        let _ = return_levels(&fit, &draws, 0.01, None).unwrap();
    });
    run_both(c, "coverage_500", &|| {
        let _ = coverage_check(&fit, &data, &[0.5, 0.9], 500, 2).unwrap();
    });
    run_both(c, "full_fit", &|| {
        let _ = outer_optimize(&data, ModelSpec::M2, Some(&fit.theta_hat().unwrap()), &FitOptions::default()).unwrap();
    });
}

criterion_group!(parallel, benches);
criterion_main!(parallel);
