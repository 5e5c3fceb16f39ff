use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rad_core::{exact_fsd, fsd_cost_matrix, quantile_particles, sinkhorn, CostSamples};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sorted_uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn bench_sinkhorn(c: &mut Criterion) {
    let mut group = c.benchmark_group("sinkhorn");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &n in &[16usize, 64] {
        let x = sorted_uniform(&mut rng, n);
        let y = sorted_uniform(&mut rng, n);
        let cost = fsd_cost_matrix(&x, &y).unwrap();
        let w = vec![1.0 / n as f64; n];
        for &chi in &[0.1, 0.01, 0.001] {
            group.bench_with_input(BenchmarkId::new(format!("chi={chi}"), n), &n, |b, _| {
                b.iter(|| sinkhorn(&cost, &w, &w, chi, 1e-9, 10_000).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_exact(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = sorted_uniform(&mut rng, 64);
    let y = sorted_uniform(&mut rng, 64);
    c.bench_function("exact_fsd/64", |b| b.iter(|| exact_fsd(&x, &y).unwrap()));
}

fn bench_particles(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples = CostSamples::new((0..4096).map(|_| rng.random::<f64>()).collect()).unwrap();
    c.bench_function("quantile_particles/4096->16", |b| {
        b.iter(|| quantile_particles(&samples, 16).unwrap())
    });
}

criterion_group!(benches, bench_sinkhorn, bench_exact, bench_particles);
criterion_main!(benches);
