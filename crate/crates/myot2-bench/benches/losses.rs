use criterion::{black_box, criterion_group, criterion_main, Criterion};
use myot2_bench::rand_tensor;
use myot2_core::losses::{ssim, SsimConfig};

fn bench_ssim(c: &mut Criterion) {
    let a = rand_tensor(&[1, 1, 64, 64], 1);
    let b = rand_tensor(&[1, 1, 64, 64], 2);
    let cfg = SsimConfig::default();
    c.bench_function("ssim_64x64", |bch| {
        bch.iter(|| ssim(black_box(&a), black_box(&b), &cfg))
    });
}

criterion_group!(benches, bench_ssim);
criterion_main!(benches);
