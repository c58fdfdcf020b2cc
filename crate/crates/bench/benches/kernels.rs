use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use famamba_core::numerics::ops::conv2d;
use famamba_core::numerics::ConvSpec;
use famamba_core::ssm::quadratic_attention;
use famamba_core::timing::ScanProblem;
use famamba_core::wavelet::{dwt2, iwt2};
use famamba_core::{Model, ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn scan_vs_attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("sequence");
    g.sample_size(10);
    for l in [512usize, 1024, 2048, 4096] {
        g.throughput(Throughput::Elements(l as u64));
        let p = ScanProblem::new(l, 16, 16, 1);
        g.bench_with_input(BenchmarkId::new("selective_scan", l), &p, |b, p| b.iter(|| p.run().unwrap()));
        let (q, k, v) = (uniform(&[l, 16], 2), uniform(&[l, 16], 3), uniform(&[l, 16], 4));
        g.bench_with_input(BenchmarkId::new("attention", l), &l, |b, _| {
            b.iter(|| quadratic_attention(&q, &k, &v).unwrap())
        });
    }
    g.finish();
}

fn wavelet(c: &mut Criterion) {
    let mut g = c.benchmark_group("haar");
    for s in [64usize, 256] {
        let x = uniform(&[1, 3, s, s], 5);
        g.bench_with_input(BenchmarkId::new("dwt2_iwt2", s), &x, |b, x| b.iter(|| iwt2(&dwt2(x).unwrap()).unwrap()));
    }
    g.finish();
}

fn convolution(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for ch in [8usize, 32] {
        let x = uniform(&[1, ch, 64, 64], 6);
        let w = uniform(&[ch, ch, 3, 3], 7);
        g.bench_with_input(BenchmarkId::new("3x3", ch), &ch, |b, _| b.iter(|| conv2d(&x, &w, None, ConvSpec::same(3)).unwrap()));
    }
    g.finish();
}

fn toy_forward(c: &mut Criterion) {
    let model = Model::<f32>::build(&ModelConfig::toy()).unwrap();
    let x = uniform(&[1, 3, 32, 32], 8).map(|v| v.abs());
    c.bench_function("toy_forward_32x32", |b| b.iter(|| model.forward(&x).unwrap()));
}

criterion_group!(benches, scan_vs_attention, wavelet, convolution, toy_forward);
criterion_main!(benches);
