use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use cse_bench::{desk_model, items, pair};
use cse_core::config::{Config, Preset};
use cse_core::dsp::{istft, stft_samples, StftConfig};
use cse_core::enhance::{enhance_batch, StreamEnhancer};
use cse_core::tensor::Tensor;
use cse_core::train::Trainer;
use cse_core::vq::{quantize, Codebook};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dsp(c: &mut Criterion) {
    let cfg = StftConfig::default();
    let (noisy, _) = pair(2.0, 0);
    c.bench_function("stft 2s", |b| b.iter(|| stft_samples(black_box(&noisy), &cfg).unwrap()));
    let spec = stft_samples(&noisy, &cfg).unwrap();
    c.bench_function("istft 2s", |b| b.iter(|| istft(black_box(&spec), &cfg).unwrap()));
}

fn vq(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cb = Codebook::new(Tensor::randn(&[1024, 64], 1.0, &mut rng)).unwrap();
    let x = Tensor::randn(&[256, 64], 1.0, &mut rng);
    c.bench_function("quantize 256x64 K=1024", |b| {
        b.iter(|| quantize(black_box(&x), &cb).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let m = desk_model();
    let (noisy, _) = pair(2.0, 3);
    let mut g = c.benchmark_group("desk model");
    g.sample_size(10);
    g.bench_function("batch enhance 2s", |b| {
        b.iter(|| enhance_batch(&m, black_box(&noisy), None, false).unwrap())
    });
    // One hop of audio per push: the per-frame streaming cost.
    let hop = m.config.stft.hop_length;
    g.bench_function("streaming frame", |b| {
        b.iter_batched(
            || {
                let mut s = StreamEnhancer::new(&m, false).unwrap();
                s.push(&noisy[..m.config.stft.win_length * 4]).unwrap();
                s
            },
            |mut s| s.push(black_box(&noisy[..hop])).unwrap(),
            BatchSize::SmallInput,
        )
    });
    let cfg = Config::preset(Preset::Desk);
    let data = items(&cfg, 4, 1.5);
    let mut t = Trainer::new(m.clone());
    g.bench_function("train step batch 4", |b| b.iter(|| t.step(&data).unwrap()));
    g.finish();
}

criterion_group!(benches, dsp, vq, model);
criterion_main!(benches);
