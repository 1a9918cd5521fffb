use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lm4mt::Tape;
use lm4mt_bench::random_tensor;
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let a = random_tensor(&[n, n], 1).with_grad();
        let b = random_tensor(&[n, n], 2).with_grad();
        g.bench_with_input(BenchmarkId::new("forward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::inference();
                let (x, y) = (tape.leaf(&a), tape.leaf(&b));
                black_box(tape.matmul(x, y).unwrap());
            })
        });
        g.bench_with_input(BenchmarkId::new("forward+backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.leaf(&a), tape.leaf(&b));
                let z = tape.matmul(x, y).unwrap();
                let s = tape.sum(z);
                tape.backward(s).unwrap();
                black_box(tape.grad(x).map(|g| g[0]));
            })
        });
    }
    g.finish();
}

fn softmax_layer_norm(c: &mut Criterion) {
    let x = random_tensor(&[512, 128], 3);
    let gain = random_tensor(&[128], 4);
    let bias = random_tensor(&[128], 5);
    c.bench_function("softmax 512x128", |b| {
        b.iter(|| {
            let mut tape = Tape::inference();
            let v = tape.leaf(&x);
            black_box(tape.softmax(v, 1).unwrap());
        })
    });
    c.bench_function("layer_norm 512x128", |b| {
        b.iter(|| {
            let mut tape = Tape::inference();
            let (v, g, s) = (tape.leaf(&x), tape.leaf(&gain), tape.leaf(&bias));
            black_box(tape.layer_norm(v, g, s, 1e-5).unwrap());
        })
    });
}

criterion_group!(benches, matmul, softmax_layer_norm);
criterion_main!(benches);
