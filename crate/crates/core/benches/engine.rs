use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sabre_core::{preset, run, EngineOptions};

// Without the `parallel` feature every worker count runs sequentially, so the
// two series coincide.
fn workers(c: &mut Criterion) {
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get().max(2));
    let mut group = c.benchmark_group("engine");
    group.sample_size(10);
    for (name, t_max) in [("p2p5-node4-labelflip", 2000), ("n50-labelflip-10", 200)] {
        let mut s = preset(name).unwrap();
        s.t_max = t_max;
        for w in [1, threads] {
            let label = if w == 1 { "sequential".to_string() } else { format!("parallel-{w}") };
            group.bench_with_input(BenchmarkId::new(label, name), &s, |b, s| {
                b.iter(|| black_box(run(s, EngineOptions { workers: w }).unwrap().rows.len()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, workers);
criterion_main!(benches);
