use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pairlink_core::coincidence::{count_coincidences, delay_scan};

/// `n` sorted tags over one second with a correlated partner stream shifted
/// by `delay` and smeared by a few hundred ps.
fn streams(n: usize, delay: u64) -> (Vec<u64>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let mut a: Vec<u64> = (0..n).map(|_| rng.random_range(0..1_000_000_000_000)).collect();
    a.sort_unstable();
    let mut b: Vec<u64> = a
        .iter()
        .map(|&t| if rng.random_bool(0.1) { t + delay + rng.random_range(0..400) } else { rng.random_range(0..1_000_000_000_000) })
        .collect();
    b.sort_unstable();
    (a, b)
}

fn counting(c: &mut Criterion) {
    let mut g = c.benchmark_group("count_coincidences");
    for n in [10_000usize, 100_000, 1_000_000] {
        let (a, b) = streams(n, 151_225_000);
        g.throughput(Throughput::Elements(2 * n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| count_coincidences(&a, &b, 151_225_000, 1000).unwrap())
        });
    }
    g.finish();
}

fn scanning(c: &mut Criterion) {
    let mut g = c.benchmark_group("delay_scan");
    g.sample_size(10);
    let (a, b) = streams(200_000, 151_225_000);
    g.throughput(Throughput::Elements(a.len() as u64));
    g.bench_function("fine ±50 ns at 156 ps", |bench| {
        bench.iter(|| delay_scan(&a, &b, 151_175_000, 151_275_000, 156).unwrap())
    });
    g.bench_function("coarse ±1 ms at 1 ns", |bench| {
        bench.iter(|| delay_scan(&a, &b, -1_000_000_000, 1_000_000_000, 1000).unwrap())
    });
    g.finish();
}

criterion_group!(benches, counting, scanning);
criterion_main!(benches);
