//! Sequential vs parallel timings for the data-parallel inner loops. Both
//! modes produce bit-identical results; only the scheduling differs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use eclip_core::encoder::{Activation, EncoderSpec, ModelParams};
use eclip_core::exec::ExecMode;
use eclip_core::preprocess::patch_hash;
use eclip_core::train::{multistream_step, LabelMode, TrainBatch};
use eclip_core::{random_matrix, random_unit_rows, test_rng};

fn modes() -> Vec<(&'static str, ExecMode)> {
    let mut m = vec![("sequential", ExecMode::Sequential)];
    if cfg!(feature = "parallel") {
        m.push(("parallel", ExecMode::Parallel));
    }
    m
}

fn bench_multistream(c: &mut Criterion) {
    let text_spec = EncoderSpec {
        input_dim: 64,
        hidden: vec![48],
        output_dim: 16,
        activation: Activation::Tanh,
        tokens_per_sample: 1,
    };
    let image_spec = EncoderSpec {
        input_dim: 144,
        hidden: vec![48],
        output_dim: 16,
        activation: Activation::Tanh,
        tokens_per_sample: 1,
    };
    let params = ModelParams::init(&text_spec, &image_spec, 0).unwrap();
    let mut rng = test_rng(1);
    let n = 128;
    let batch = TrainBatch {
        text: random_matrix(&mut rng, n, 64, 1.0),
        images: random_matrix(&mut rng, n, 144, 1.0),
        catalogs: (0..n as u64).map(|i| i / 3).collect(),
    };

    let mut group = c.benchmark_group("multistream_step_n128_m8");
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let out = multistream_step(
                    &params,
                    &text_spec,
                    &image_spec,
                    black_box(&batch),
                    8,
                    LabelMode::Soft,
                    mode,
                    None,
                )
                .unwrap();
                black_box(out.loss)
            })
        });
    }
    group.finish();
}

fn bench_similarity_blocks(c: &mut Criterion) {
    let mut rng = test_rng(2);
    let x = random_unit_rows(&mut rng, 256, 32);
    let y = random_unit_rows(&mut rng, 256, 32);

    let mut group = c.benchmark_group("similarity_blocked_n256");
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let sim =
                    eclip_core::loss::similarity_matrix_blocked(black_box(&x), &y, 16, mode)
                        .unwrap();
                black_box(sim.matrix().get(0, 0))
            })
        });
    }
    group.finish();
}

fn bench_kmeans(c: &mut Criterion) {
    let mut rng = test_rng(3);
    let points = random_matrix(&mut rng, 512, 16, 1.0);

    let mut group = c.benchmark_group("kmeans_n512_k8");
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let res =
                    eclip_core::eval::kmeans::kmeans(black_box(&points), 8, 7, 50, 1e-6, mode)
                        .unwrap();
                black_box(res.inertia)
            })
        });
    }
    group.finish();
}

fn bench_patch_hash(c: &mut Criterion) {
    use eclip_core::pixmap::ImageBuffer;
    let mut rng = test_rng(4);
    let images: Vec<ImageBuffer> = (0..64)
        .map(|_| {
            let pixels: Vec<u8> = (0..96 * 96 * 3).map(|_| rand::Rng::random(&mut rng)).collect();
            ImageBuffer::new(96, 96, pixels).unwrap()
        })
        .collect();

    let mut group = c.benchmark_group("patch_hash_batch64_96px");
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let hashes = eclip_core::exec::map_items(mode, black_box(&images), |img| {
                    patch_hash(img).unwrap()
                });
                black_box(hashes.len())
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_multistream,
    bench_similarity_blocks,
    bench_kmeans,
    bench_patch_hash
);
criterion_main!(benches);
