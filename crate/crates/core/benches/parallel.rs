//! Sequential vs rayon comparisons for the data-parallel kernels and the
//! full registration forward pass.
//!
//! Run with `cargo bench -p morphreg --bench parallel`; the `parallel`
//! feature must be enabled (it is by default) so both code paths exist.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use morphreg::geometry::PointCloud;
use morphreg::kernels;
use morphreg::model::{register, ModelConfig, ModelParams};

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("matmul_f32");
    for &(m, k, n) in &[(256usize, 64usize, 256usize), (1000, 64, 512)] {
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out = vec![0.0f32; m * n];
        let label = format!("{m}x{k}x{n}");
        group.bench_with_input(BenchmarkId::new("seq", &label), &(), |bench, _| {
            bench.iter(|| {
                kernels::matmul_into_seq(false, false, m, k, n, 1.0, &a, &b, 0.0, &mut out)
            })
        });
        group.bench_with_input(BenchmarkId::new("par", &label), &(), |bench, _| {
            bench.iter(|| {
                kernels::matmul_into_par(false, false, m, k, n, 1.0, &a, &b, 0.0, &mut out)
            })
        });
    }
    group.finish();
}

fn bench_chamfer_kernel(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("min_sqdist_f32");
    for &n in &[512usize, 2048] {
        let a = random_points(&mut rng, n);
        let b = random_points(&mut rng, n);
        group.bench_with_input(BenchmarkId::new("seq", n), &(), |bench, _| {
            bench.iter(|| kernels::min_sqdist_seq(&a, &b))
        });
        group.bench_with_input(BenchmarkId::new("par", n), &(), |bench, _| {
            bench.iter(|| kernels::min_sqdist_par(&a, &b))
        });
    }
    group.finish();
}

fn bench_neighbor_counts(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut group = c.benchmark_group("neighbor_counts_f32");
    for &n in &[2_000usize, 20_000] {
        let pts = random_points(&mut rng, n);
        group.bench_with_input(BenchmarkId::new("seq", n), &(), |bench, _| {
            bench.iter(|| kernels::neighbor_counts_seq(&pts, 0.05f32))
        });
        group.bench_with_input(BenchmarkId::new("par", n), &(), |bench, _| {
            bench.iter(|| kernels::neighbor_counts_par(&pts, 0.05f32))
        });
    }
    group.finish();
}

fn bench_register_forward(c: &mut Criterion) {
    // whole-pipeline forward at a reduced size; the parallel path engages
    // through the dispatching kernels
    let cfg = ModelConfig {
        num_probes: 16,
        latent_dim: 32,
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 4,
        embedder_widths: vec![8, 16, 32],
        ff_hidden: 128,
        final_mlp_widths: vec![16, 8, 3],
        density_radius: 0.05,
        layer_norm: true,
        residual_output: false,
        surface_attention: true,
    };
    let params = ModelParams::<f32>::init(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud = |rng: &mut ChaCha8Rng| -> PointCloud<f32> {
        let rows: Vec<[f32; 3]> = (0..600)
            .map(|_| {
                let g = [
                    rng.gen_range(-1.0f32..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-3);
                [g[0] / n, g[1] / n, g[2] / n]
            })
            .collect();
        PointCloud::from_rows(&rows).unwrap().normalize().unwrap()
    };
    let source = cloud(&mut rng);
    let target = cloud(&mut rng);

    let mut group = c.benchmark_group("register_forward_600pts");
    group.sample_size(10);
    group.bench_function("dispatching", |bench| {
        bench.iter(|| register(&params, &cfg, &source, &target).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_chamfer_kernel,
    bench_neighbor_counts,
    bench_register_forward
);
criterion_main!(benches);
