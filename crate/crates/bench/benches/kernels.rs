use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eps_seg::autograd::Graph;
use eps_seg::data::{sample_sparse_labels, synth_generate, BatchConfig, BatchStream, SynthSpec};
use eps_seg::hvae::ModelConfig;
use eps_seg::inference::{segment_image, InferenceConfig};
use eps_seg::losses::{contrastive_loss, gaussian_kl};
use eps_seg::model::{EpsSeg, TrainBatch};
use eps_seg::tensor::Tensor;
use eps_seg::trainer::{train_step, TrainConfig, TrainState};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Arc::new(random(&[32, 16, 33, 33], &mut rng));
    let w = Arc::new(random(&[16, 16, 3, 3], &mut rng));
    c.bench_function("conv2d 32x16x33x33 k3 forward", |b| {
        b.iter(|| {
            let g = Graph::<f32>::new();
            black_box(g.leaf(x.clone(), false).conv2d(g.leaf(w.clone(), false), None, 1, 1).value().data()[0])
        })
    });
    c.bench_function("conv2d 32x16x33x33 k3 forward+backward", |b| {
        b.iter(|| {
            let g = Graph::<f32>::new();
            let y = g.leaf(x.clone(), true).conv2d(g.param(w.clone()), None, 1, 1).sum_all();
            black_box(g.backward(y))
        })
    });
}

fn training(c: &mut Criterion) {
    let model = EpsSeg::new(&ModelConfig::default()).unwrap();
    let images = synth_generate(&SynthSpec { num_images: 2, image_side: 128, ..SynthSpec::default() }).unwrap();
    let labels = sample_sparse_labels(&images, 3, 0.002, 0, true, 3).unwrap();
    let config = TrainConfig::default();
    let batches = BatchConfig {
        batch_size: config.batch_size,
        unlabeled_fraction: config.unlabeled_fraction,
        patch_side: model.config().patch_side,
        mask: config.mask,
        seed: 0,
    };
    let stream = BatchStream::new(&images, &labels, batches).unwrap();
    let batch = TrainBatch::from_samples(&stream.batch_at(1)).unwrap();
    let state = TrainState::new(&model, 0);
    c.bench_function("train step, default model, batch 32", |b| {
        b.iter_batched(|| state.clone(), |mut s| black_box(train_step(&model, &mut s, &batch, &config).unwrap()), BatchSize::LargeInput)
    });

    let pixels = synth_generate(&SynthSpec { num_images: 1, image_side: 64, ..SynthSpec::default() }).unwrap().remove(0).pixels;
    let inference = InferenceConfig { stride: 4, ..InferenceConfig::default() };
    c.bench_function("segment 64x64 image, stride 4", |b| {
        b.iter(|| black_box(segment_image(&model, &state.params, &pixels, &inference).unwrap()))
    });
}

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    let (mq, sq, mp, sp) = (v(512, -1.0, 1.0), v(512, 0.5, 2.0), v(512, -1.0, 1.0), v(512, 0.5, 2.0));
    c.bench_function("gaussian_kl 512 dims", |b| b.iter(|| black_box(gaussian_kl(&mq, &sq, &mp, &sp).unwrap())));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let levels: Vec<Tensor<f64>> = [16, 32, 64]
        .iter()
        .map(|&d| Tensor::new(vec![32, d], (0..32 * d).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let labels: Vec<_> = (0..32).map(|i| (i % 2 == 0).then_some((i / 2 % 3) as u8)).collect();
    c.bench_function("contrastive loss, batch 32, 3 levels", |b| {
        b.iter(|| black_box(contrastive_loss(&levels, &labels, 5.0, 0.5).unwrap()))
    });
}

criterion_group!(benches, conv, training, losses);
criterion_main!(benches);
