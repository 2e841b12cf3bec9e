use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gcr_core::routing::route;
use gcr_core::scoring::head_anomaly_map;
use gcr_core::{select_coreset, CoresetConfig, Matrix, PrototypeBank, RoutingConfig, ScoringConfig};

const DIM: usize = 64;
const GRID: (usize, usize) = (14, 14);

fn matrix(rng: &mut ChaCha8Rng, rows: usize) -> Matrix {
    Matrix::new(rows, DIM, (0..rows * DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn bank(rng: &mut ChaCha8Rng, name: &str, k: usize) -> PrototypeBank {
    PrototypeBank::uniform(name, matrix(rng, k), 0, k, "bench", false).unwrap()
}

fn coreset(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pool = matrix(&mut rng, 20 * GRID.0 * GRID.1);
    let mut g = c.benchmark_group("coreset");
    g.sample_size(10);
    for k in [16, 64, 256] {
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| select_coreset(&pool, &CoresetConfig { k, seed: 0 }).unwrap())
        });
    }
    g.finish();
}

fn routing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let patches = matrix(&mut rng, GRID.0 * GRID.1);
    let mut g = c.benchmark_group("route_5_heads");
    for k in [16, 64, 256] {
        let banks: Vec<PrototypeBank> = (0..5).map(|i| bank(&mut rng, &format!("c{i}"), k)).collect();
        let refs: Vec<&PrototypeBank> = banks.iter().collect();
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| route(&patches, &refs, &RoutingConfig::default()).unwrap())
        });
    }
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let patches = matrix(&mut rng, GRID.0 * GRID.1);
    let cfg = ScoringConfig::default();
    let mut g = c.benchmark_group("head_anomaly_map");
    for k in [16, 64, 256] {
        let head = bank(&mut rng, "c", k);
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| head_anomaly_map(&patches, GRID, &head, &cfg).unwrap())
        });
    }
    g.finish();
}

/// One pool thread so numbers track single-image latency.
fn single_thread() {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
}

fn all(c: &mut Criterion) {
    single_thread();
    coreset(c);
    routing(c);
    scoring(c);
}

criterion_group!(benches, all);
criterion_main!(benches);
