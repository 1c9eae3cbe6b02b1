//! Hot kernels, each timed on one thread and on the full rayon pool.
//!
//! Build with `--no-default-features` for the sequential code path; the
//! group names carry the build flavour so both runs can sit side by side.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rtsom::grid::{build_angular, build_mesh, Rect};
use rtsom::medium::{phantoms, rasterize_phantom, Coefficient};
use rtsom::operators::Factorization;
use rtsom::par::is_parallel;
use rtsom::recon::OneStepObjective;
use rtsom::spectral::compute_svd;
use rtsom::transport::{measure_current, solve_forward, ForwardOptions};

fn flavour() -> &'static str {
    if is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn pools() -> Vec<(usize, rayon::ThreadPool)> {
    let all = rayon::current_num_threads();
    let mut sizes = vec![1];
    if is_parallel() && all > 1 {
        sizes.push(all);
    }
    sizes
        .into_iter()
        .map(|n| (n, rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()))
        .collect()
}

fn kernels(c: &mut Criterion) {
    let mesh = build_mesh(40, 40, Rect::square(2.0), 80, 8).unwrap();
    let ang = build_angular(16, 0.0).unwrap();
    let field = rasterize_phantom(&phantoms::absorbing_disk(), &mesh);
    let fact = Factorization::new(Coefficient::Absorption, &field, &mesh, &ang).unwrap();
    let sigma = field.coefficient(Coefficient::Absorption).to_vec();
    let w: Vec<f64> = (0..fact.dim()).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect();

    let small_mesh = build_mesh(12, 12, Rect::square(2.0), 24, 4).unwrap();
    let small_ang = build_angular(8, 0.0).unwrap();
    let small_field = rasterize_phantom(&phantoms::absorbing_disk(), &small_mesh);
    let small = Factorization::new(Coefficient::Absorption, &small_field, &small_mesh, &small_ang).unwrap();
    let cache = compute_svd(&small.a, [0; 32]).unwrap();
    let data: Vec<Vec<f64>> = (0..4)
        .map(|q| {
            let u = solve_forward(&small_field, &small_ang, &small_mesh, q, &ForwardOptions::default())
                .unwrap()
                .u;
            measure_current(&u, &small_mesh, &small_ang)
        })
        .collect();
    let objective = OneStepObjective::new(&small, &cache, &data, 10).unwrap();
    let mut x = vec![0.0; objective.n_gamma()];
    x.extend(small_field.coefficient(Coefficient::Absorption));

    let mut group = c.benchmark_group(format!("kernels-{}", flavour()));
    group.sample_size(10);
    for (threads, pool) in pools() {
        group.bench_with_input(BenchmarkId::new("streaming_solve", threads), &threads, |b, _| {
            let t = fact.streaming();
            b.iter(|| pool.install(|| t.solve(&w)))
        });
        group.bench_with_input(BenchmarkId::new("apply_b", threads), &threads, |b, _| {
            b.iter(|| pool.install(|| fact.apply_b(&sigma, &w)))
        });
        group.bench_with_input(BenchmarkId::new("forward_solve", threads), &threads, |b, _| {
            b.iter(|| pool.install(|| solve_forward(&field, &ang, &mesh, 0, &ForwardOptions::default()).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("assemble_a", threads), &threads, |b, _| {
            b.iter(|| {
                pool.install(|| {
                    Factorization::new(Coefficient::Absorption, &small_field, &small_mesh, &small_ang).unwrap()
                })
            })
        });
        group.bench_with_input(BenchmarkId::new("one_step_objective", threads), &threads, |b, _| {
            b.iter(|| pool.install(|| objective.evaluate(&x)))
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
